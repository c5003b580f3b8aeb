//! ODE-level ground truth, independent of the series algebra: direct
//! integration of the cocycle equation, Lyapunov-exponent and fibered
//! rotation-number estimates, and pointwise verification of conjugations.

use std::f64::consts::PI;

use crate::fourier::MatrixSeries;
use crate::mat2::Sl2;
use crate::weights::FrequencyVector;
use crate::{invalid, numerical, Result};

type R2x2 = [[f64; 2]; 2];

fn rmul(a: &R2x2, b: &R2x2) -> R2x2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn rdet(a: &R2x2) -> f64 {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

#[cfg(test)]
fn rnorm(a: &R2x2) -> f64 {
    let mut m = 0.0f64;
    for r in a {
        for v in r {
            m = m.max(v.abs());
        }
    }
    m
}

fn rfinite(a: &R2x2) -> bool {
    a.iter().all(|r| r.iter().all(|v| v.is_finite()))
}

/// A linear quasiperiodic system X' = (A + F(theta + t omega)) X.
#[derive(Debug, Clone)]
pub struct CocycleSystem {
    pub a: Sl2,
    pub f: MatrixSeries,
    pub omega: FrequencyVector,
    pub label: String,
}

impl CocycleSystem {
    pub fn new(a: Sl2, f: MatrixSeries, omega: FrequencyVector, label: &str) -> Result<Self> {
        if f.d != omega.dim() {
            return Err(invalid("perturbation dimension does not match the frequency"));
        }
        Ok(CocycleSystem { a, f, omega, label: label.to_string() })
    }

    /// Constant-coefficient system (zero perturbation).
    pub fn constant(a: Sl2, omega: FrequencyVector) -> Self {
        let d = omega.dim();
        CocycleSystem { a, f: MatrixSeries::zero(d, 1), omega, label: "constant".to_string() }
    }

    pub fn dim(&self) -> usize {
        self.omega.dim()
    }

    /// System matrix at the torus point theta; the imaginary residue of the
    /// series evaluation is discarded (the coefficients are conjugate pairs).
    pub fn eval(&self, theta: &[f64]) -> R2x2 {
        let m = self.a.to_mat2() + self.f.evaluate_complex(theta);
        m.real_part()
    }

    fn eval_flow(&self, theta0: &[f64], t: f64) -> R2x2 {
        let theta: Vec<f64> =
            theta0.iter().zip(&self.omega.omega).map(|(th, w)| th + t * w).collect();
        self.eval(&theta)
    }
}

/// Schroedinger companion system for -y'' + q(theta + t omega) y = E y with
/// the builtin potential q(theta) = 2 lambda cos(2 pi theta), d = 1.
pub fn schrodinger_cos(lambda: f64, energy: f64, omega: FrequencyVector) -> Result<CocycleSystem> {
    if omega.dim() != 1 {
        return Err(invalid("the cosine potential family is one-dimensional"));
    }
    let mut q = MatrixSeries::zero(1, 1);
    // 2 lambda cos(2 pi theta) = lambda e^{2 pi i theta} + lambda e^{-2 pi i theta}.
    q.add_real_mode(vec![1], crate::mat2::Mat2::from_real(lambda, 0.0, 0.0, 0.0));
    schrodinger_from_series(&q, energy, omega)
}

/// Schroedinger companion system with the potential given by the (0,0)
/// scalar entry of a series: the matrix [[0,1],[q-E,0]] is already traceless.
pub fn schrodinger_from_series(
    q: &MatrixSeries,
    energy: f64,
    omega: FrequencyVector,
) -> Result<CocycleSystem> {
    if q.d != omega.dim() {
        return Err(invalid("potential dimension does not match the frequency"));
    }
    let q0 = q.mean().e[0][0];
    if q0.im.abs() > 1e-12 * q.norm0().max(1e-300) {
        return Err(invalid("potential mean must be real"));
    }
    let a = Sl2::new(0.0, 1.0, q0.re - energy);
    let mut f = MatrixSeries::zero(q.d, q.denom);
    for (h, m) in q.coeffs_iter() {
        if h.iter().all(|v| *v == 0) {
            continue;
        }
        let mut entry = crate::mat2::Mat2::ZERO;
        entry.e[1][0] = m.e[0][0];
        f.set_coeff(h.clone(), entry);
    }
    CocycleSystem::new(a, f, omega, "schrodinger")
}

/// Fundamental solution X^T(theta0) by classical 4th-order one-step
/// integration, with the determinant renormalized to 1 every 100 steps.
pub fn integrate(sys: &CocycleSystem, theta0: &[f64], t_final: f64, h: f64) -> Result<R2x2> {
    if !(h > 0.0) || !(t_final >= 0.0) {
        return Err(invalid("need h > 0 and T >= 0"));
    }
    let mut x = [[1.0, 0.0], [0.0, 1.0]];
    let mut t = 0.0;
    let mut steps = 0usize;
    while t < t_final - 1e-15 * t_final.max(1.0) {
        let hs = h.min(t_final - t);
        x = rk4_step(sys, theta0, t, hs, &x);
        t += hs;
        steps += 1;
        if steps % 100 == 0 {
            renorm_det(&mut x)?;
        }
        if !rfinite(&x) {
            return Err(numerical(format!("nonfinite state at t = {t:.6e}")));
        }
    }
    renorm_det(&mut x)?;
    Ok(x)
}

fn rk4_step(sys: &CocycleSystem, theta0: &[f64], t: f64, h: f64, x: &R2x2) -> R2x2 {
    let m1 = sys.eval_flow(theta0, t);
    let m2 = sys.eval_flow(theta0, t + 0.5 * h);
    let m3 = sys.eval_flow(theta0, t + h);
    let k1 = rmul(&m1, x);
    let k2 = rmul(&m2, &axpy(x, &k1, 0.5 * h));
    let k3 = rmul(&m2, &axpy(x, &k2, 0.5 * h));
    let k4 = rmul(&m3, &axpy(x, &k3, h));
    let mut out = *x;
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] += h / 6.0 * (k1[i][j] + 2.0 * k2[i][j] + 2.0 * k3[i][j] + k4[i][j]);
        }
    }
    out
}

fn axpy(x: &R2x2, k: &R2x2, s: f64) -> R2x2 {
    let mut out = *x;
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] += s * k[i][j];
        }
    }
    out
}

fn renorm_det(x: &mut R2x2) -> Result<()> {
    let d = rdet(x);
    if !(d > 0.0) || !d.is_finite() {
        return Err(numerical(format!("determinant left the positive cone: {d:.6e}")));
    }
    let s = d.sqrt();
    for r in x.iter_mut() {
        for v in r.iter_mut() {
            *v /= s;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LyapunovEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: Vec<f64>,
}

/// Top Lyapunov exponent: theta-sample average of the accumulated
/// Gram-Schmidt growth of the first frame column over [0, T].
pub fn lyapunov(sys: &CocycleSystem, t_final: f64, n_samples: usize, h: f64) -> Result<LyapunovEstimate> {
    if n_samples == 0 || !(t_final > 0.0) || !(h > 0.0) {
        return Err(invalid("need n_samples >= 1, T > 0, h > 0"));
    }
    let d = sys.dim();
    let mut samples = Vec::with_capacity(n_samples);
    for j in 0..n_samples {
        let theta0 = vec![j as f64 / n_samples as f64; d];
        let mut x = [[1.0, 0.0], [0.0, 1.0]];
        let mut t = 0.0;
        let mut steps = 0usize;
        let mut log_growth = 0.0;
        while t < t_final - 1e-15 * t_final.max(1.0) {
            let hs = h.min(t_final - t);
            x = rk4_step(sys, &theta0, t, hs, &x);
            t += hs;
            steps += 1;
            if steps % 100 == 0 {
                log_growth += qr_renorm(&mut x)?;
            }
        }
        log_growth += qr_renorm(&mut x)?;
        samples.push(log_growth / t_final);
    }
    let mean = samples.iter().sum::<f64>() / n_samples as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>()
        / (n_samples.max(2) - 1) as f64;
    let std_err = (var / n_samples as f64).sqrt();
    Ok(LyapunovEstimate { mean, std_err, samples })
}

/// Modified Gram-Schmidt on the frame columns; returns ln of the first
/// column's norm (the top growth factor) and leaves the frame orthonormal.
fn qr_renorm(x: &mut R2x2) -> Result<f64> {
    let r11 = (x[0][0] * x[0][0] + x[1][0] * x[1][0]).sqrt();
    if !(r11 > 0.0) || !r11.is_finite() {
        return Err(numerical("frame column collapsed during renormalization"));
    }
    x[0][0] /= r11;
    x[1][0] /= r11;
    let r12 = x[0][0] * x[0][1] + x[1][0] * x[1][1];
    x[0][1] -= r12 * x[0][0];
    x[1][1] -= r12 * x[1][0];
    let r22 = (x[0][1] * x[0][1] + x[1][1] * x[1][1]).sqrt();
    if !(r22 > 0.0) || !r22.is_finite() {
        return Err(numerical("frame column collapsed during renormalization"));
    }
    x[0][1] /= r22;
    x[1][1] /= r22;
    Ok(r11.ln())
}

const ROTATION_SAMPLES: usize = 4;
const MAX_HALVINGS: usize = 20;

/// Fibered rotation number: continuous-argument drift of X^t(theta) v over
/// [0, T], averaged over a fixed set of theta samples.  The per-step argument
/// increment is guarded by |d arg| < pi/2; violations halve the step size.
pub fn rotation_number(sys: &CocycleSystem, t_final: f64, h: f64) -> Result<f64> {
    if !(t_final > 0.0) || !(h > 0.0) {
        return Err(invalid("need T > 0 and h > 0"));
    }
    let d = sys.dim();
    let mut total = 0.0;
    for j in 0..ROTATION_SAMPLES {
        let theta0 = vec![j as f64 / ROTATION_SAMPLES as f64; d];
        let mut hs = h;
        let mut halvings = 0usize;
        'retry: loop {
            match rotation_sample(sys, &theta0, t_final, hs) {
                Ok(arg) => {
                    total += arg / t_final;
                    break 'retry;
                }
                Err(RotationFailure::GuardTripped) => {
                    halvings += 1;
                    if halvings > MAX_HALVINGS {
                        return Err(numerical(
                            "argument guard kept failing down to the minimal step size",
                        ));
                    }
                    hs *= 0.5;
                }
                Err(RotationFailure::Collapse(t)) => {
                    return Err(numerical(format!(
                        "direction vector collapsed at t = {t:.6e}"
                    )));
                }
            }
        }
    }
    Ok(total / ROTATION_SAMPLES as f64)
}

enum RotationFailure {
    GuardTripped,
    Collapse(f64),
}

fn rotation_sample(
    sys: &CocycleSystem,
    theta0: &[f64],
    t_final: f64,
    h: f64,
) -> std::result::Result<f64, RotationFailure> {
    let mut v = [1.0f64, 0.0f64];
    let mut t = 0.0;
    let mut arg = 0.0;
    while t < t_final - 1e-15 * t_final.max(1.0) {
        let hs = h.min(t_final - t);
        let w = rk4_vec_step(sys, theta0, t, hs, &v);
        let cross = v[0] * w[1] - v[1] * w[0];
        let dot = v[0] * w[0] + v[1] * w[1];
        let dstep = cross.atan2(dot);
        if !dstep.is_finite() || dstep.abs() >= 0.5 * PI {
            return Err(RotationFailure::GuardTripped);
        }
        arg += dstep;
        let n = (w[0] * w[0] + w[1] * w[1]).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(RotationFailure::Collapse(t));
        }
        v = [w[0] / n, w[1] / n];
        t += hs;
    }
    Ok(arg)
}

fn rk4_vec_step(sys: &CocycleSystem, theta0: &[f64], t: f64, h: f64, v: &[f64; 2]) -> [f64; 2] {
    let mv = |m: &R2x2, u: &[f64; 2]| [m[0][0] * u[0] + m[0][1] * u[1], m[1][0] * u[0] + m[1][1] * u[1]];
    let m1 = sys.eval_flow(theta0, t);
    let m2 = sys.eval_flow(theta0, t + 0.5 * h);
    let m3 = sys.eval_flow(theta0, t + h);
    let k1 = mv(&m1, v);
    let k2 = mv(&m2, &[v[0] + 0.5 * h * k1[0], v[1] + 0.5 * h * k1[1]]);
    let k3 = mv(&m2, &[v[0] + 0.5 * h * k2[0], v[1] + 0.5 * h * k2[1]]);
    let k4 = mv(&m3, &[v[0] + h * k3[0], v[1] + h * k3[1]]);
    [
        v[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        v[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ]
}

/// Max-entry residual of d_omega Z - (A+F) Z + Z (A'+F') on a uniform grid
/// of grid_n^d points of the doubled torus; the derivative is computed from
/// the Fourier coefficients (exact for a finite series).
pub fn verify_conjugation(
    z: &MatrixSeries,
    before: &CocycleSystem,
    after: &CocycleSystem,
    grid_n: usize,
) -> Result<f64> {
    if before.dim() != after.dim() || z.d != before.dim() {
        return Err(invalid("dimension mismatch between Z and the systems"));
    }
    if grid_n == 0 {
        return Err(invalid("grid_n must be >= 1"));
    }
    let dz = z.derive_omega(&before.omega);
    let mut worst = 0.0f64;
    for_each_grid_point(before.dim(), grid_n, |theta| {
        let zv = z.evaluate_complex(theta);
        let dzv = dz.evaluate_complex(theta);
        let mb = before.a.to_mat2() + before.f.evaluate_complex(theta);
        let ma = after.a.to_mat2() + after.f.evaluate_complex(theta);
        let res = dzv - mb * zv + zv * ma;
        worst = worst.max(res.norm());
    });
    Ok(worst)
}

/// Finite-difference variant of [`verify_conjugation`]: d_omega Z by a
/// central difference of width dh along the flow direction.  Cross-check
/// only; the spectral derivative is the reference path.
pub fn verify_conjugation_fd(
    z: &MatrixSeries,
    before: &CocycleSystem,
    after: &CocycleSystem,
    grid_n: usize,
    dh: f64,
) -> Result<f64> {
    if !(dh > 0.0) {
        return Err(invalid("need dh > 0"));
    }
    if before.dim() != after.dim() || z.d != before.dim() {
        return Err(invalid("dimension mismatch between Z and the systems"));
    }
    let omega = &before.omega.omega;
    let mut worst = 0.0f64;
    for_each_grid_point(before.dim(), grid_n, |theta| {
        let fwd: Vec<f64> = theta.iter().zip(omega).map(|(t, w)| t + dh * w).collect();
        let bwd: Vec<f64> = theta.iter().zip(omega).map(|(t, w)| t - dh * w).collect();
        let dzv = (z.evaluate_complex(&fwd) - z.evaluate_complex(&bwd)).scale_re(0.5 / dh);
        let zv = z.evaluate_complex(theta);
        let mb = before.a.to_mat2() + before.f.evaluate_complex(theta);
        let ma = after.a.to_mat2() + after.f.evaluate_complex(theta);
        let res = dzv - mb * zv + zv * ma;
        worst = worst.max(res.norm());
    });
    Ok(worst)
}

/// Uniform grid over the doubled torus [0,2)^d with grid_n points per axis.
fn for_each_grid_point(d: usize, grid_n: usize, mut f: impl FnMut(&[f64])) {
    let mut idx = vec![0usize; d];
    loop {
        let theta: Vec<f64> = idx.iter().map(|i| 2.0 * *i as f64 / grid_n as f64).collect();
        f(&theta);
        let mut pos = 0;
        loop {
            if pos == d {
                return;
            }
            idx[pos] += 1;
            if idx[pos] < grid_n {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// One row of the plot-data emission.
#[derive(Debug, Clone, Copy)]
pub struct SampleRow {
    pub theta: f64,
    pub t: f64,
    pub log_norm: f64,
    pub rotation: f64,
}

/// Per-sample growth and rotation data for a fixed horizon.
pub fn sample_rows(
    sys: &CocycleSystem,
    t_final: f64,
    n_samples: usize,
    h: f64,
) -> Result<Vec<SampleRow>> {
    if n_samples == 0 {
        return Err(invalid("need n_samples >= 1"));
    }
    let d = sys.dim();
    let mut rows = Vec::with_capacity(n_samples);
    for j in 0..n_samples {
        let theta = j as f64 / n_samples as f64;
        let theta0 = vec![theta; d];
        let mut x = [[1.0, 0.0], [0.0, 1.0]];
        let mut t = 0.0;
        let mut steps = 0usize;
        let mut log_growth = 0.0;
        while t < t_final - 1e-15 * t_final.max(1.0) {
            let hs = h.min(t_final - t);
            x = rk4_step(sys, &theta0, t, hs, &x);
            t += hs;
            steps += 1;
            if steps % 100 == 0 {
                log_growth += qr_renorm(&mut x)?;
            }
        }
        log_growth += qr_renorm(&mut x)?;
        let rot = rotation_sample(sys, &theta0, t_final, h)
            .map(|arg| arg / t_final)
            .map_err(|_| numerical("rotation sample failed during emission"))?;
        rows.push(SampleRow { theta, t: t_final, log_norm: log_growth, rotation: rot });
    }
    Ok(rows)
}

/// Writes the `theta, T, log_norm, rotation` CSV table.
pub fn write_csv<W: std::io::Write>(w: &mut W, rows: &[SampleRow]) -> std::io::Result<()> {
    writeln!(w, "theta,T,log_norm,rotation")?;
    for row in rows {
        writeln!(
            w,
            "{:.12e},{:.12e},{:.12e},{:.12e}",
            row.theta, row.t, row.log_norm, row.rotation
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat2::Mat2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn golden() -> FrequencyVector {
        FrequencyVector::new(vec![(5f64.sqrt() - 1.0) / 2.0]).unwrap()
    }

    #[test]
    fn constant_rotation_closed_form() {
        let alpha = 0.7;
        let sys = CocycleSystem::constant(Sl2::rotation(alpha), golden());
        let x = integrate(&sys, &[0.0], 1.0, 1e-3).unwrap();
        let (c, s) = (alpha.cos(), alpha.sin());
        let exact = [[c, -s], [s, c]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((x[i][j] - exact[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_hyperbolic_closed_form() {
        let a = 0.9;
        let sys = CocycleSystem::constant(Sl2::new(a, 0.0, 0.0), golden());
        let t = 2.0;
        let x = integrate(&sys, &[0.3], t, 1e-3).unwrap();
        assert!((x[0][0] - (a * t).exp()).abs() < 1e-8 * (a * t).exp());
        assert!((x[1][1] - (-a * t).exp()).abs() < 1e-8);
        assert!(x[0][1].abs() < 1e-12 && x[1][0].abs() < 1e-12);
    }

    fn random_system(rng: &mut ChaCha8Rng) -> CocycleSystem {
        let a = Sl2::new(
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        );
        let mut f = MatrixSeries::zero(1, 1);
        let m = Mat2::from_real(
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
            0.0,
        );
        // Traceless real mode: e11 + e22 = 0 and conjugate pair symmetry.
        let mut mm = m;
        mm.e[1][1] = -mm.e[0][0];
        f.add_real_mode(vec![1], mm.scale_re(0.5));
        CocycleSystem::new(a, f, golden(), "random").unwrap()
    }

    #[test]
    fn richardson_halving_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut ratios = Vec::new();
        for _ in 0..50 {
            let sys = random_system(&mut rng);
            let h = 0.02;
            let x1 = integrate(&sys, &[0.1], 1.0, h).unwrap();
            let x2 = integrate(&sys, &[0.1], 1.0, h / 2.0).unwrap();
            let x4 = integrate(&sys, &[0.1], 1.0, h / 4.0).unwrap();
            let e1 = rnorm(&sub(&x1, &x2));
            let e2 = rnorm(&sub(&x2, &x4));
            if e2 > 1e-14 {
                ratios.push(e1 / e2);
            }
        }
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ratios[ratios.len() / 2];
        assert!(
            (10.0..=24.0).contains(&median),
            "4th-order halving ratio median {median:.2} out of range"
        );
    }

    fn sub(a: &R2x2, b: &R2x2) -> R2x2 {
        let mut out = *a;
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] -= b[i][j];
            }
        }
        out
    }

    #[test]
    fn determinant_stays_renormalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..10 {
            let sys = random_system(&mut rng);
            let x = integrate(&sys, &[0.2], 5.0, 1e-3).unwrap();
            assert!((rdet(&x) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lyapunov_elliptic_is_zero() {
        let sys = CocycleSystem::constant(Sl2::rotation(0.8), golden());
        let est = lyapunov(&sys, 50.0, 8, 1e-2).unwrap();
        assert!(est.mean.abs() <= 3.0 * est.std_err.max(1e-12));
    }

    #[test]
    fn lyapunov_hyperbolic_recovers_rate() {
        let a = 0.6;
        let sys = CocycleSystem::constant(Sl2::new(a, 0.0, 0.0), golden());
        let est = lyapunov(&sys, 50.0, 4, 1e-3).unwrap();
        assert!((est.mean - a).abs() < 1e-6, "got {}", est.mean);
    }

    #[test]
    fn schrodinger_large_coupling_positive_exponent() {
        // 2 lambda = 4 and the energy below min q: strongly hyperbolic
        // regime, growth rate ~ sqrt(q - E); two resolutions agree.
        let sys = schrodinger_cos(2.0, -6.0, golden()).unwrap();
        let coarse = lyapunov(&sys, 60.0, 6, 2e-3).unwrap();
        let fine = lyapunov(&sys, 60.0, 6, 1e-3).unwrap();
        assert!(coarse.mean > 1.0, "exponent should be positive, got {}", coarse.mean);
        assert!((coarse.mean - fine.mean).abs() < 1e-4 + 3.0 * (coarse.std_err + fine.std_err));
    }

    #[test]
    fn schrodinger_matrix_shape() {
        let sys = schrodinger_cos(1.5, 0.25, golden()).unwrap();
        let m = sys.eval(&[0.0]);
        // [[0,1],[q(0) - E, 0]] with q(0) = 2 lambda.
        assert!((m[0][1] - 1.0).abs() < 1e-12);
        assert!((m[1][0] - (3.0 - 0.25)).abs() < 1e-12);
        assert!(m[0][0].abs() < 1e-12 && m[1][1].abs() < 1e-12);
    }

    #[test]
    fn rotation_number_of_rotation_generator() {
        let alpha = 0.9;
        let sys = CocycleSystem::constant(Sl2::rotation(alpha), golden());
        let rho = rotation_number(&sys, 40.0, 1e-2).unwrap();
        assert!((rho - alpha).abs() < 1e-6, "got {rho}");
    }

    #[test]
    fn rotation_number_stable_under_small_perturbation() {
        let alpha = 0.9;
        let base = CocycleSystem::constant(Sl2::rotation(alpha), golden());
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut sys = random_system(&mut rng);
        sys.a = Sl2::rotation(alpha);
        sys.f = sys.f.scale(1e-3 / sys.f.norm0().max(1e-300));
        let rho0 = rotation_number(&base, 60.0, 1e-2).unwrap();
        let rho1 = rotation_number(&sys, 60.0, 1e-2).unwrap();
        assert!((rho1 - rho0).abs() < 0.05, "drift {}", (rho1 - rho0).abs());
    }

    #[test]
    fn renormalization_shifts_rotation_number() {
        // Resonant elliptic matrix: the removing conjugation shifts the
        // angle by pi <m', omega>, and the measured rotation numbers of the
        // before/after systems differ by exactly that amount.
        let freq = golden();
        let psi = crate::weights::ApproxSpec::power(2.0).unwrap();
        let alpha = PI * freq.omega[0] + 1e-4;
        let a = Sl2::rotation(alpha);
        let (phi, a_tilde, rep) =
            crate::resonance::renormalize(&a, &freq, &psi, 0.5, 2.0, 4.0).unwrap();
        assert!(rep.resonant);
        let before = CocycleSystem::constant(a, freq.clone());
        let after = CocycleSystem::constant(a_tilde, freq.clone());
        let rho_b = rotation_number(&before, 60.0, 1e-2).unwrap();
        let rho_a = rotation_number(&after, 60.0, 1e-2).unwrap();
        let shift = PI * freq.dot(&rep.m2);
        assert!(
            ((rho_b - rho_a) - shift).abs() < 1e-4,
            "measured {} vs recorded {}",
            rho_b - rho_a,
            shift
        );
        // And the conjugation itself checks out pointwise.
        let res = verify_conjugation(&phi.as_series(), &before, &after, 128).unwrap();
        assert!(res < 1e-10, "residual {res:.3e}");
    }

    #[test]
    fn verify_identity_conjugation() {
        let sys = CocycleSystem::constant(Sl2::rotation(0.4), golden());
        let z = MatrixSeries::identity(1);
        let res = verify_conjugation(&z, &sys, &sys, 64).unwrap();
        assert!(res < 1e-15);
    }

    #[test]
    fn corrupted_coefficient_is_detected() {
        let freq = golden();
        let psi = crate::weights::ApproxSpec::power(2.0).unwrap();
        let alpha = PI * freq.omega[0] + 1e-4;
        let a = Sl2::rotation(alpha);
        let (phi, a_tilde, _) =
            crate::resonance::renormalize(&a, &freq, &psi, 0.5, 2.0, 4.0).unwrap();
        let before = CocycleSystem::constant(a, freq.clone());
        let after = CocycleSystem::constant(a_tilde, freq);
        let mut z = phi.as_series();
        let h = z.coeffs_iter().next().unwrap().0.clone();
        let mut m = z.coeff(&h);
        m.e[0][0] += num_complex::Complex64::new(1e-6, 0.0);
        z.set_coeff(h, m);
        let res = verify_conjugation(&z, &before, &after, 128).unwrap();
        assert!(res >= 1e-7, "corruption went unnoticed: {res:.3e}");
    }

    #[test]
    fn finite_difference_derivative_agrees() {
        let freq = golden();
        let psi = crate::weights::ApproxSpec::power(2.0).unwrap();
        let alpha = PI * freq.omega[0] + 1e-4;
        let a = Sl2::rotation(alpha);
        let (phi, a_tilde, _) =
            crate::resonance::renormalize(&a, &freq, &psi, 0.5, 2.0, 4.0).unwrap();
        let before = CocycleSystem::constant(a, freq.clone());
        let after = CocycleSystem::constant(a_tilde, freq);
        let z = phi.as_series();
        let spectral = verify_conjugation(&z, &before, &after, 64).unwrap();
        let fd = verify_conjugation_fd(&z, &before, &after, 64, 1e-5).unwrap();
        // The FD path adds an O(dh^2 |Z'''|) discretization error.
        assert!((spectral - fd).abs() < 1e-6, "spectral {spectral:.3e} vs fd {fd:.3e}");
    }

    #[test]
    fn csv_emission_format() {
        let sys = CocycleSystem::constant(Sl2::rotation(0.5), golden());
        let rows = sample_rows(&sys, 2.0, 3, 1e-2).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("theta,T,log_norm,rotation"));
        assert_eq!(lines.count(), 3);
        for row in &rows {
            assert!((row.rotation - 0.5).abs() < 1e-4);
            assert!(row.log_norm.abs() < 0.1);
        }
    }
}
