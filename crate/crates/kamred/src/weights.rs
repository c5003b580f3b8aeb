//! Weight and approximating functions, the arithmetic condition on the
//! frequency vector, and the parameter schedules of the reduction scheme.
//!
//! The weight function `lambda` is increasing and subadditive with
//! `lambda(0) = 0`; the analytic class is `lambda(t) = t` and the Gevrey-s
//! class is `lambda(t) = t^(1/s)`.  The approximating function `psi` bounds
//! how fast `<k, omega>` may approach zero; `psi(t) = t^tau` is the
//! Diophantine case.  Exotic weights are supplied as two-column tables and
//! interpolated monotonically in log-log coordinates.

use crate::{invalid, numerical, Result};

/// Piecewise monotone cubic interpolant in log-log coordinates, extended
/// beyond the table by the boundary log-log slopes.
#[derive(Debug, Clone)]
pub struct MonotoneTable {
    /// ln t at the knots, strictly increasing.
    lx: Vec<f64>,
    /// ln f at the knots, strictly increasing.
    ly: Vec<f64>,
    /// Node slopes d(ln f)/d(ln t) (Fritsch-Carlson).
    slope: Vec<f64>,
}

impl MonotoneTable {
    pub fn new(points: &[(f64, f64)]) -> Result<Self> {
        if points.len() < 2 {
            return Err(invalid("table needs at least two points"));
        }
        for &(t, v) in points {
            if !(t > 0.0) || !(v > 0.0) || !t.is_finite() || !v.is_finite() {
                return Err(invalid("table entries must be finite and positive"));
            }
        }
        for w in points.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(invalid("table abscissas must be strictly increasing"));
            }
            if !(w[1].1 > w[0].1) {
                return Err(invalid("table values must be strictly increasing"));
            }
        }
        let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
        let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
        let n = lx.len();
        let mut sec = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            sec.push((ly[i + 1] - ly[i]) / (lx[i + 1] - lx[i]));
        }
        let mut slope = vec![0.0; n];
        slope[0] = sec[0];
        slope[n - 1] = sec[n - 2];
        for i in 1..n - 1 {
            let (d0, d1) = (sec[i - 1], sec[i]);
            if d0 * d1 <= 0.0 {
                slope[i] = 0.0;
            } else {
                let (h0, h1) = (lx[i] - lx[i - 1], lx[i + 1] - lx[i]);
                let w1 = 2.0 * h1 + h0;
                let w2 = h1 + 2.0 * h0;
                slope[i] = (w1 + w2) / (w1 / d0 + w2 / d1);
            }
        }
        Ok(MonotoneTable { lx, ly, slope })
    }

    /// ln f at ln t, with linear (log-log) extension outside the table.
    pub fn eval_ln(&self, lt: f64) -> f64 {
        let n = self.lx.len();
        if lt <= self.lx[0] {
            return self.ly[0] + self.slope[0] * (lt - self.lx[0]);
        }
        if lt >= self.lx[n - 1] {
            return self.ly[n - 1] + self.slope[n - 1] * (lt - self.lx[n - 1]);
        }
        let i = match self.lx.binary_search_by(|x| x.partial_cmp(&lt).unwrap()) {
            Ok(i) => return self.ly[i],
            Err(i) => i - 1,
        };
        let h = self.lx[i + 1] - self.lx[i];
        let s = (lt - self.lx[i]) / h;
        let (y0, y1) = (self.ly[i], self.ly[i + 1]);
        let (m0, m1) = (self.slope[i] * h, self.slope[i + 1] * h);
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * y0
            + (s3 - 2.0 * s2 + s) * m0
            + (-2.0 * s3 + 3.0 * s2) * y1
            + (s3 - s2) * m1
    }

    /// d(ln f)/d(ln t) at ln t.
    pub fn slope_ln(&self, lt: f64) -> f64 {
        let n = self.lx.len();
        if lt <= self.lx[0] {
            return self.slope[0];
        }
        if lt >= self.lx[n - 1] {
            return self.slope[n - 1];
        }
        let i = match self.lx.binary_search_by(|x| x.partial_cmp(&lt).unwrap()) {
            Ok(i) => return self.slope[i],
            Err(i) => i - 1,
        };
        let h = self.lx[i + 1] - self.lx[i];
        let s = (lt - self.lx[i]) / h;
        let (y0, y1) = (self.ly[i], self.ly[i + 1]);
        let (m0, m1) = (self.slope[i] * h, self.slope[i + 1] * h);
        let s2 = s * s;
        let d = (6.0 * s2 - 6.0 * s) * y0
            + (3.0 * s2 - 4.0 * s + 1.0) * m0
            + (-6.0 * s2 + 6.0 * s) * y1
            + (3.0 * s2 - 2.0 * s) * m1;
        d / h
    }

    /// Inverse in ln coordinates: ln t such that eval_ln(ln t) = ln y.
    pub fn inv_ln(&self, ly: f64) -> f64 {
        let n = self.lx.len();
        if ly <= self.ly[0] {
            return self.lx[0] + (ly - self.ly[0]) / self.slope[0];
        }
        if ly >= self.ly[n - 1] {
            return self.lx[n - 1] + (ly - self.ly[n - 1]) / self.slope[n - 1];
        }
        // Bisection on the monotone interpolant.
        let (mut lo, mut hi) = (self.lx[0], self.lx[n - 1]);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.eval_ln(mid) < ly {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 * (1.0 + hi.abs()) {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Parses a two-column `t value` table; `#` starts a comment.
pub fn parse_table(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let t: f64 = it
            .next()
            .ok_or_else(|| invalid(format!("table line {}: missing t", lineno + 1)))?
            .parse()
            .map_err(|_| invalid(format!("table line {}: bad number", lineno + 1)))?;
        let v: f64 = it
            .next()
            .ok_or_else(|| invalid(format!("table line {}: missing value", lineno + 1)))?
            .parse()
            .map_err(|_| invalid(format!("table line {}: bad number", lineno + 1)))?;
        if it.next().is_some() {
            return Err(invalid(format!("table line {}: trailing fields", lineno + 1)));
        }
        out.push((t, v));
    }
    if out.len() < 2 {
        return Err(invalid("table needs at least two data lines"));
    }
    for w in out.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(invalid("table abscissas must be strictly increasing"));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub enum WeightKind {
    /// lambda(t) = t.
    Analytic,
    /// lambda(t) = t^(1/s), s > 1.
    Gevrey(f64),
    Tabulated(MonotoneTable),
}

/// The weight function lambda defining the exponential Fourier weights.
#[derive(Debug, Clone)]
pub struct WeightSpec {
    pub kind: WeightKind,
}

impl WeightSpec {
    pub fn analytic() -> Self {
        WeightSpec { kind: WeightKind::Analytic }
    }

    pub fn gevrey(s: f64) -> Result<Self> {
        if !(s > 1.0) {
            return Err(invalid("gevrey exponent must satisfy s > 1"));
        }
        Ok(WeightSpec { kind: WeightKind::Gevrey(s) })
    }

    pub fn tabulated(points: &[(f64, f64)]) -> Result<Self> {
        Ok(WeightSpec { kind: WeightKind::Tabulated(MonotoneTable::new(points)?) })
    }

    pub fn eval(&self, t: f64) -> f64 {
        debug_assert!(t >= 0.0);
        if t == 0.0 {
            return 0.0;
        }
        match &self.kind {
            WeightKind::Analytic => t,
            WeightKind::Gevrey(s) => t.powf(1.0 / s),
            WeightKind::Tabulated(tab) => tab.eval_ln(t.ln()).exp(),
        }
    }

    /// ln lambda(e^lt); safe for arguments far outside f64 range.
    pub fn eval_ln(&self, lt: f64) -> f64 {
        match &self.kind {
            WeightKind::Analytic => lt,
            WeightKind::Gevrey(s) => lt / s,
            WeightKind::Tabulated(tab) => tab.eval_ln(lt),
        }
    }

    pub fn inv(&self, y: f64) -> f64 {
        debug_assert!(y >= 0.0);
        if y == 0.0 {
            return 0.0;
        }
        match &self.kind {
            WeightKind::Analytic => y,
            WeightKind::Gevrey(s) => y.powf(*s),
            WeightKind::Tabulated(tab) => tab.inv_ln(y.ln()).exp(),
        }
    }

    /// ln inverse: ln t such that lambda(t) = e^ly.
    pub fn inv_ln(&self, ly: f64) -> f64 {
        match &self.kind {
            WeightKind::Analytic => ly,
            WeightKind::Gevrey(s) => ly * s,
            WeightKind::Tabulated(tab) => tab.inv_ln(ly),
        }
    }

    pub fn deriv(&self, t: f64) -> f64 {
        debug_assert!(t > 0.0);
        match &self.kind {
            WeightKind::Analytic => 1.0,
            WeightKind::Gevrey(s) => t.powf(1.0 / s - 1.0) / s,
            WeightKind::Tabulated(tab) => {
                let lt = t.ln();
                // f'(t) = f(t) * dlnf/dlnt / t.
                (tab.eval_ln(lt) - lt).exp() * tab.slope_ln(lt)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum ApproxKind {
    /// psi(t) = t^tau for t >= 1 (and psi(t) = t below 1, keeping psi >= id).
    Power(f64),
    Tabulated(MonotoneTable),
}

/// The approximating function psi of the arithmetic condition.
#[derive(Debug, Clone)]
pub struct ApproxSpec {
    pub kind: ApproxKind,
}

impl ApproxSpec {
    pub fn power(tau: f64) -> Result<Self> {
        if !(tau >= 1.0) {
            return Err(invalid("power exponent must satisfy tau >= 1"));
        }
        Ok(ApproxSpec { kind: ApproxKind::Power(tau) })
    }

    pub fn tabulated(points: &[(f64, f64)]) -> Result<Self> {
        Ok(ApproxSpec { kind: ApproxKind::Tabulated(MonotoneTable::new(points)?) })
    }

    pub fn eval(&self, t: f64) -> f64 {
        debug_assert!(t >= 0.0);
        if t == 0.0 {
            return 0.0;
        }
        match &self.kind {
            ApproxKind::Power(tau) => {
                if t < 1.0 {
                    t
                } else {
                    t.powf(*tau)
                }
            }
            ApproxKind::Tabulated(tab) => tab.eval_ln(t.ln()).exp(),
        }
    }

    /// ln psi(e^lt).
    pub fn eval_ln(&self, lt: f64) -> f64 {
        match &self.kind {
            ApproxKind::Power(tau) => {
                if lt < 0.0 {
                    lt
                } else {
                    lt * tau
                }
            }
            ApproxKind::Tabulated(tab) => tab.eval_ln(lt),
        }
    }

    pub fn inv(&self, y: f64) -> f64 {
        debug_assert!(y >= 0.0);
        if y == 0.0 {
            return 0.0;
        }
        match &self.kind {
            ApproxKind::Power(tau) => {
                if y < 1.0 {
                    y
                } else {
                    y.powf(1.0 / tau)
                }
            }
            ApproxKind::Tabulated(tab) => tab.inv_ln(y.ln()).exp(),
        }
    }

    /// ln inverse: ln t such that psi(t) = e^ly.
    pub fn inv_ln(&self, ly: f64) -> f64 {
        match &self.kind {
            ApproxKind::Power(tau) => {
                if ly < 0.0 {
                    ly
                } else {
                    ly / tau
                }
            }
            ApproxKind::Tabulated(tab) => tab.inv_ln(ly),
        }
    }

    pub fn deriv(&self, t: f64) -> f64 {
        debug_assert!(t > 0.0);
        match &self.kind {
            ApproxKind::Power(tau) => {
                if t < 1.0 {
                    1.0
                } else {
                    tau * t.powf(tau - 1.0)
                }
            }
            ApproxKind::Tabulated(tab) => {
                let lt = t.ln();
                (tab.eval_ln(lt) - lt).exp() * tab.slope_ln(lt)
            }
        }
    }
}

/// The translation frequency vector with an optional certified constant.
#[derive(Debug, Clone)]
pub struct FrequencyVector {
    pub omega: Vec<f64>,
    /// Certified lower-bound constant for |<k,omega>| * psi(|k|), if known.
    pub kappa: Option<f64>,
}

impl FrequencyVector {
    pub fn new(omega: Vec<f64>) -> Result<Self> {
        if omega.is_empty() {
            return Err(invalid("frequency vector must have dimension >= 1"));
        }
        if omega.iter().any(|w| !w.is_finite() || w.abs() > 1.0) {
            return Err(invalid("frequency entries must satisfy |omega_i| <= 1"));
        }
        Ok(FrequencyVector { omega, kappa: None })
    }

    pub fn with_kappa(mut self, kappa: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(invalid("kappa must lie in (0,1)"));
        }
        self.kappa = Some(kappa);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    pub fn dot(&self, k: &[i64]) -> f64 {
        k.iter().zip(&self.omega).map(|(ki, wi)| *ki as f64 * wi).sum()
    }
}

/// Visits every nonzero lattice vector k with |k|_1 <= bound whose first
/// nonzero entry is positive (one representative per +-k pair).
pub(crate) fn for_each_half_lattice(d: usize, bound: i64, mut f: impl FnMut(&[i64])) {
    let mut k = vec![0i64; d];
    fn rec(k: &mut Vec<i64>, i: usize, rem: i64, started: bool, f: &mut impl FnMut(&[i64])) {
        if i == k.len() {
            if started {
                f(k);
            }
            return;
        }
        let lo = if started { -rem } else { 0 };
        for v in lo..=rem {
            k[i] = v;
            rec(k, i + 1, rem - v.abs(), started || v > 0, f);
        }
        k[i] = 0;
    }
    rec(&mut k, 0, bound, false, &mut f);
}

/// Smallest certified value of |<k,omega>| * psi(|k|_1) over 0 < |k|_1 <= K.
///
/// Returns the constant together with the lattice vector attaining it
/// (ties broken by the lexicographically smallest representative).
pub fn check_frequency(
    freq: &FrequencyVector,
    psi: &ApproxSpec,
    k_order: i64,
) -> Result<(f64, Vec<i64>)> {
    if k_order < 1 {
        return Err(invalid("order K must be >= 1"));
    }
    let mut best = f64::INFINITY;
    let mut best_k: Vec<i64> = Vec::new();
    for_each_half_lattice(freq.dim(), k_order, |k| {
        let l1: i64 = k.iter().map(|v| v.abs()).sum();
        let val = freq.dot(k).abs() * psi.eval(l1 as f64);
        if val < best || (val == best && (best_k.is_empty() || k < best_k.as_slice())) {
            best = val;
            best_k = k.to_vec();
        }
    });
    Ok((best, best_k))
}

const GL16_X: [f64; 8] = [
    0.09501250983763744,
    0.2816035507792589,
    0.45801677765722737,
    0.6178762444026438,
    0.755404408355003,
    0.8656312023878318,
    0.9445750230732326,
    0.9894009349916499,
];
const GL16_W: [f64; 8] = [
    0.189450610455069,
    0.18260341504492358,
    0.169156519395003,
    0.14959598881657674,
    0.12462897125553388,
    0.09515851168249279,
    0.062253523938647894,
    0.027152459411754096,
];

fn gl16(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut s = 0.0;
    for i in 0..8 {
        s += GL16_W[i] * (f(c + h * GL16_X[i]) + f(c - h * GL16_X[i]));
    }
    s * h
}

fn panels(f: &impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        let x0 = a + (b - a) * i as f64 / n as f64;
        let x1 = a + (b - a) * (i + 1) as f64 / n as f64;
        s += gl16(f, x0, x1);
    }
    s
}

/// Improper integral of lambda'(t) ln psi(t) / lambda(t)^2 over [lower, inf).
///
/// The integral is evaluated in the variable u = ln t over geometrically
/// growing segments.  Convergent tails are extrapolated geometrically from
/// the segment increments.  Divergence is declared (+inf returned) when six
/// consecutive segment doublings each change the partial integral by more
/// than `tol` without the increments decaying.
pub fn brjuno_russmann_integral(
    lambda: &WeightSpec,
    psi: &ApproxSpec,
    lower: f64,
    tol: f64,
) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    if !(lower >= 1.0) {
        return Err(invalid("lower bound must be >= 1"));
    }
    // Integrand in u = ln t, computed through logarithms so that segments far
    // beyond f64 range contribute exactly their underflowed value.
    let g = |u: f64| -> f64 {
        let ln_lam = lambda.eval_ln(u);
        let ln_psi = psi.eval_ln(u);
        if ln_psi <= 0.0 {
            return 0.0;
        }
        // lambda'(t) = lambda(t) * slope / t with slope = dln(lambda)/dln(t).
        let slope = match &lambda.kind {
            WeightKind::Analytic => 1.0,
            WeightKind::Gevrey(s) => 1.0 / s,
            WeightKind::Tabulated(tab) => tab.slope_ln(u),
        };
        // f(t) * t = slope * ln(psi) / lambda(t).
        slope * ln_psi.ln().exp() * (-ln_lam).exp()
    };
    let u0 = lower.ln();
    if !g(u0).is_finite() {
        return Err(numerical("integrand not finite at the lower bound"));
    }
    let width0 = 1.0f64.max(u0);
    let mut acc = 0.0f64;
    let mut prev_inc = f64::NAN;
    let mut stagnant = 0usize;
    let mut seg_lo = u0;
    let mut seg_w = width0;
    let mut last_ratio = 0.0f64;
    for _ in 0..64 {
        let inc = panels(&g, seg_lo, seg_lo + seg_w, 16);
        if !inc.is_finite() {
            return Ok(f64::INFINITY);
        }
        let ratio = if prev_inc.is_finite() && prev_inc > 0.0 {
            inc / prev_inc
        } else {
            0.0
        };
        if inc > tol * acc.max(1e-300).max(tol) && (ratio >= 0.98 || prev_inc.is_nan()) {
            stagnant += 1;
            if stagnant >= 6 {
                return Ok(f64::INFINITY);
            }
        } else {
            stagnant = 0;
        }
        acc += inc;
        if prev_inc.is_finite() && inc <= 0.5 * tol * acc && ratio < 1.0 {
            let q = ratio.clamp(0.0, 0.99);
            return Ok(acc + inc * q / (1.0 - q));
        }
        prev_inc = inc;
        last_ratio = ratio;
        seg_lo += seg_w;
        seg_w *= 2.0;
    }
    if last_ratio < 1.0 {
        let q = last_ratio.clamp(0.0, 0.99);
        Ok(acc + prev_inc * q / (1.0 - q))
    } else {
        Ok(f64::INFINITY)
    }
}

/// One round of reduction parameters derived from (r, log eps).
#[derive(Debug, Clone, serde::Serialize)]
pub struct StepParams {
    /// Truncation order N (may overflow to +inf for extreme schedules).
    pub n: f64,
    pub ln_n: f64,
    /// Renormalization range factor R.
    pub r_factor: f64,
    pub ln_r_factor: f64,
    /// ln of the shrunk constant kappa'' = kappa * eps^zeta.
    pub ln_kappa2: f64,
    /// Next analyticity radius r'.
    pub r_next: f64,
    /// The radius spent by this step, r - r' (kept separately because the
    /// subtraction may be below f64 resolution at extreme schedules).
    pub decrement: f64,
    /// r' <= 0: the radius schedule is exhausted.
    pub exhausted: bool,
    /// R < 2: the resonance-removal range requirement fails.
    pub r_factor_small: bool,
}

/// Computes (N, R, kappa'', r') from (r, log eps); all powers of eps are
/// carried in log space so that extreme schedules never overflow.
pub fn step_parameters(
    r: f64,
    log_eps: f64,
    lambda: &WeightSpec,
    psi: &ApproxSpec,
    delta: f64,
    zeta: f64,
    kappa: f64,
) -> Result<StepParams> {
    if !(r > 0.0) {
        return Err(invalid("radius must be positive"));
    }
    if !(log_eps < 0.0) {
        return Err(invalid("eps must lie in (0,1), i.e. log eps < 0"));
    }
    let abs_log = -log_eps;
    let ln_n = lambda.inv_ln((50.0 * abs_log / (std::f64::consts::PI * r)).ln());
    // R = psi^{-1}(eps^{-zeta}) / (3N).
    let ln_r_factor = psi.inv_ln(zeta * abs_log) - 3.0f64.ln() - ln_n;
    let ln_kappa2 = kappa.ln() + zeta * log_eps;
    // r' = r - 50 delta |log eps| / (pi lambda(RN)).
    let ln_lam_rn = lambda.eval_ln(ln_r_factor + ln_n);
    let decrement = ((50.0 * delta * abs_log / std::f64::consts::PI).ln() - ln_lam_rn).exp();
    let r_next = r - decrement;
    Ok(StepParams {
        n: ln_n.exp(),
        ln_n,
        r_factor: ln_r_factor.exp(),
        ln_r_factor,
        ln_kappa2,
        r_next,
        decrement,
        exhausted: !(r_next > 0.0),
        r_factor_small: ln_r_factor < 2.0f64.ln(),
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ScheduleRow {
    pub k: usize,
    pub log_eps: f64,
    pub r: f64,
    pub n: f64,
    pub ln_n: f64,
    pub r_factor: f64,
    pub ln_r_factor: f64,
    pub ln_kappa2: f64,
}

/// The full radius/size schedule of a reduction run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct KamSchedule {
    pub delta: f64,
    pub zeta: f64,
    pub rows: Vec<ScheduleRow>,
    /// r0 minus the total radius spent over all steps (tail-estimated).
    pub r_limit: f64,
    /// Total radius spent, kept separately from r_limit because it can be
    /// far below the f64 resolution of r0.
    pub radius_spent: f64,
    /// Whether the closed-form convergence bound stays below r0.
    pub assumption_ok: bool,
    /// The closed-form bound on the total radius loss.
    pub loss_bound: f64,
    /// Step index at which r would have crossed zero, if any.
    pub failure_at: Option<usize>,
}

/// Builds the schedule eps_k = eps_0^((2 delta)^k), r_{k+1} = r'(r_k, eps_k).
pub fn build_schedule(
    r0: f64,
    log_eps0: f64,
    lambda: &WeightSpec,
    psi: &ApproxSpec,
    delta: f64,
    zeta: f64,
    kappa: f64,
    k_max: usize,
) -> Result<KamSchedule> {
    if !(r0 > 0.0) {
        return Err(invalid("r0 must be positive"));
    }
    if !(log_eps0 < 0.0) {
        return Err(invalid("eps0 must lie in (0,1)"));
    }
    let pi = std::f64::consts::PI;
    // Closed-form bound on the total radius loss: head term at eps_0 plus the
    // tail integral of lambda' ln psi / lambda^2 from psi^{-1}(eps_0^{-zeta}).
    let ln_t0 = psi.inv_ln(-zeta * log_eps0);
    let head =
        ((150.0 * delta * (-log_eps0) / pi).ln() - lambda.eval_ln(ln_t0)).exp();
    let coeff = 150.0 * delta / (pi * zeta * (2.0 * delta).ln());
    let tail_integral = if ln_t0 < 700.0 {
        brjuno_russmann_integral(lambda, psi, ln_t0.exp().max(1.0), 1e-10)?
    } else {
        // Lower bound beyond f64 range: integrate in u = ln t directly from
        // ln_t0 by reusing the geometric-segment quadrature shifted there.
        brjuno_russmann_tail_ln(lambda, psi, ln_t0)
    };
    let loss_bound = head + coeff * tail_integral;
    let assumption_ok = loss_bound.is_finite() && loss_bound < r0;

    let mut rows = Vec::new();
    let mut r = r0;
    let mut log_eps = log_eps0;
    let mut spent = 0.0f64;
    let mut failure_at = None;
    for k in 0..=k_max {
        let p = step_parameters(r, log_eps, lambda, psi, delta, zeta, kappa)?;
        rows.push(ScheduleRow {
            k,
            log_eps,
            r,
            n: p.n,
            ln_n: p.ln_n,
            r_factor: p.r_factor,
            ln_r_factor: p.ln_r_factor,
            ln_kappa2: p.ln_kappa2,
        });
        let term = p.decrement;
        if p.exhausted {
            failure_at = Some(k + 1);
            spent += term;
            break;
        }
        spent += term;
        if term < 1e-18 * r0 {
            // Remaining terms shrink at least geometrically; bound the tail
            // by the next term.
            let p2 = step_parameters(p.r_next, 2.0 * delta * log_eps, lambda, psi, delta, zeta, kappa)?;
            spent += 3.0 * p2.decrement;
            break;
        }
        r = p.r_next;
        log_eps *= 2.0 * delta;
    }
    Ok(KamSchedule {
        delta,
        zeta,
        rows,
        r_limit: r0 - spent,
        radius_spent: spent,
        assumption_ok,
        loss_bound,
        failure_at,
    })
}

/// Tail of the convergence integral starting at a point given only as ln t.
fn brjuno_russmann_tail_ln(lambda: &WeightSpec, psi: &ApproxSpec, u0: f64) -> f64 {
    let g = |u: f64| -> f64 {
        let ln_lam = lambda.eval_ln(u);
        let ln_psi = psi.eval_ln(u);
        if ln_psi <= 0.0 {
            return 0.0;
        }
        let slope = match &lambda.kind {
            WeightKind::Analytic => 1.0,
            WeightKind::Gevrey(s) => 1.0 / s,
            WeightKind::Tabulated(tab) => tab.slope_ln(u),
        };
        slope * ln_psi.ln().exp() * (-ln_lam).exp()
    };
    let mut acc = 0.0f64;
    let mut seg_lo = u0;
    let mut seg_w = 1.0f64.max(u0);
    let mut prev = f64::NAN;
    for _ in 0..64 {
        let inc = panels(&g, seg_lo, seg_lo + seg_w, 16);
        acc += inc;
        if prev.is_finite() && inc <= 1e-12 * acc.max(1e-300) {
            break;
        }
        prev = inc;
        seg_lo += seg_w;
        seg_w *= 2.0;
    }
    acc
}

/// Outcome of one smallness inequality: the log-space threshold on eps and
/// the margin ln(threshold) - ln(eps) (nonnegative means satisfied).
#[derive(Debug, Clone, serde::Serialize)]
pub struct SmallnessItem {
    pub name: &'static str,
    pub ln_threshold: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SmallnessReport {
    pub items: Vec<SmallnessItem>,
    pub all_pass: bool,
}

/// Diagnostic check of the closed-form smallness thresholds on eps.
///
/// Each inequality of the inductive scheme is reduced to a closed-form
/// threshold eps <= T(kappa, C0, ...) and evaluated in log space.  The fixed
/// fractional exponents correspond to the reference constants zeta = 1/1728,
/// l = 56; the report is diagnostic and never gates a run.
pub fn check_smallness(
    log_eps: f64,
    kappa: f64,
    c0: f64,
    _zeta: f64,
    delta: f64,
    l: u32,
) -> SmallnessReport {
    let pi = std::f64::consts::PI;
    let ln = |x: f64| x.ln();
    let mut items: Vec<SmallnessItem> = Vec::new();
    let mut push = |name: &'static str, ln_thr: f64| {
        items.push(SmallnessItem {
            name,
            ln_threshold: ln_thr,
            margin: ln_thr - log_eps,
            pass: log_eps <= ln_thr + 1e-12,
        });
    };

    push("c1.1", (1728.0 / 2123.0) * ln(kappa / 4.0));
    push("c1.2", -(96.0 / 11.0) * ln(4.0 * c0 * c0 / kappa.powi(13)));
    push("c1.3", -(432.0 / 215.0) * ln(48.0 * c0 * c0));
    push(
        "c2.0.0",
        (1152.0 * ln(kappa / 64.0) - 192.0 * ln(2.0 * c0))
            .min(864.0 * ln(kappa / 64.0) - 144.0 * ln(2.0 * c0)),
    );
    push("c2.0", (3456.0 / 2119.0) * ln(3.0 * kappa / (512.0 * pi * c0)));
    push(
        "c2.1",
        (3456.0 / 2119.0) * (104.0 * ln(0.75) + ln(kappa / (128.0 * pi * c0))),
    );
    // Uniform-in-j threshold for the divisor-decay inequality, plus the two
    // auxiliary conditions that let the truncation term dominate.
    let mut t22 = -(1728.0 / 178.0) * ln(24.0 * c0.powi(15) / kappa.powi(13))
        - (1_437_696.0 / 5545.0) * ln(4.0 / 3.0);
    t22 = t22.min(-(12.0 / 25.0) * ln(2.0));
    let growth = (1.0 / 3.0) * 1.25f64.powi(l.saturating_sub(1) as i32)
        - 50.0 * delta / l as f64;
    if growth < 0.0 {
        t22 = t22.min(ln(2.0) / growth);
    }
    push("c2.2", t22);
    push(
        "c2.3",
        ((1728.0 / 1628.0) * ln(0.1))
            .min(3456.0 * ln(4.0 / (5.0 * pi)))
            .min((1728.0 / 1837.0) * ln(0.05)),
    );
    push("c2.4", (1728.0 / 2141.0) * ln(kappa / 4.0));
    push(
        "c2.5.2",
        (1152.0 * ln(1.0 / 3.0))
            .min((864.0 / 829.0) * ln(1.0 / 3.0))
            .min(1728.0 * ln(1.0 / (3.0 * pi))),
    );
    push(
        "c2.6",
        ((864.0 / 197.0) * ln(0.125)).min((48.0 / 11.0) * ln(0.25)),
    );
    push("c2.7", ln(1.0 / 256.0));

    let all_pass = items.iter().all(|i| i.pass);
    SmallnessReport { items, all_pass }
}
