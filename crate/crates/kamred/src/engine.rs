//! The inductive reduction machinery: the basic conjugation step, the step
//! with resonance removal, the composite iterative step, and the driver that
//! runs the iteration to almost-reducibility.
//!
//! Paper mode uses the published constants (delta = 100000, zeta = 1/1728,
//! l = 56), whose thresholds are far below double precision; it asserts every
//! inequality and is exercised symbolically through the schedule machinery.
//! Practical mode runs the same algorithm with user constants and treats the
//! structural identities (residuals, spectra, branch logic) as authoritative
//! while recording which paper estimates hold.

use serde::Serialize;

use crate::cohomology;
use crate::fourier::{conj_by_trivial, exp_series, MatrixSeries, TrivialMap};
use crate::mat2::{Mat2, Sl2};
use crate::resonance::{self, is_br_spectrum};
use crate::sl2::{classify_default, SpectralClass};
use crate::weights::{step_parameters, ApproxSpec, FrequencyVector, WeightSpec};
use crate::{invalid, numerical, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    Paper,
    Practical,
}

#[derive(Debug, Clone)]
pub struct StepConfig {
    pub mode: Mode,
    pub delta: f64,
    pub zeta: f64,
    pub l: u32,
    pub kappa: f64,
    pub lambda: WeightSpec,
    pub psi: ApproxSpec,
    pub residual_tol: f64,
    pub det_tol: f64,
    pub max_steps: u32,
    pub target_log_eps: f64,
}

impl StepConfig {
    pub fn paper(kappa: f64, lambda: WeightSpec, psi: ApproxSpec) -> Self {
        StepConfig {
            mode: Mode::Paper,
            delta: 100000.0,
            zeta: 1.0 / 1728.0,
            l: 56,
            kappa,
            lambda,
            psi,
            residual_tol: 1e-9,
            det_tol: 1e-12,
            max_steps: 100,
            target_log_eps: -300.0,
        }
    }

    pub fn practical(
        delta: f64,
        zeta: f64,
        l: u32,
        kappa: f64,
        lambda: WeightSpec,
        psi: ApproxSpec,
    ) -> Result<Self> {
        if !(delta >= 1.05) {
            return Err(invalid("practical mode needs delta >= 1.05"));
        }
        if !(zeta > 0.0 && zeta < 0.125) {
            return Err(invalid("zeta must lie in (0, 1/8)"));
        }
        if l < 1 {
            return Err(invalid("l must be >= 1"));
        }
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(invalid("kappa must lie in (0, 1)"));
        }
        Ok(StepConfig {
            mode: Mode::Practical,
            delta,
            zeta,
            l,
            kappa,
            lambda,
            psi,
            residual_tol: 1e-9,
            det_tol: 1e-12,
            max_steps: 40,
            target_log_eps: -30.0 * std::f64::consts::LN_10,
        })
    }

    fn exp_tol(&self) -> f64 {
        (self.residual_tol * 1e-3).min(1e-13)
    }
}

#[derive(Debug, Clone)]
pub struct ReductionState {
    pub a: Sl2,
    /// Accumulated product of the trivial maps (on the doubled torus).
    pub psi_map: MatrixSeries,
    pub psi_inv: MatrixSeries,
    /// The conjugated perturbation psi^{-1} F-bar psi: what the iteration
    /// actually contracts.
    pub f_conj: MatrixSeries,
    pub r: f64,
    pub log_eps: f64,
    pub k: u32,
    /// Accumulated resonance vector, doubled.
    pub m_total2: Vec<i64>,
}

impl ReductionState {
    pub fn initial(a: Sl2, f: MatrixSeries, r: f64, lambda: &WeightSpec) -> Result<Self> {
        if !(r > 0.0) {
            return Err(invalid("initial radius must be positive"));
        }
        let d = f.d;
        let norm = f.weighted_norm(lambda, r);
        if !norm.is_finite() {
            return Err(invalid("initial perturbation norm not finite"));
        }
        let log_eps = if norm > 0.0 { norm.ln() } else { f64::NEG_INFINITY };
        Ok(ReductionState {
            a,
            psi_map: MatrixSeries::identity(d).to_denom(2),
            psi_inv: MatrixSeries::identity(d).to_denom(2),
            f_conj: f,
            r,
            log_eps,
            k: 0,
            m_total2: vec![0; d],
        })
    }
}

/// Step geometry derived from the schedule formulas, with the practical-mode
/// clamp R >= 2 (the raw R collapses below 1 at desk-scale epsilon, which
/// would make the renormalization order degenerate).
#[derive(Debug, Clone, Copy)]
pub struct StepGeometry {
    pub n: f64,
    pub r_big: f64,
    pub kappa2: f64,
    pub r_second: f64,
}

pub fn derive_geometry(state: &ReductionState, cfg: &StepConfig) -> Result<StepGeometry> {
    if !(state.log_eps < 0.0) {
        return Err(invalid("perturbation must have norm < 1"));
    }
    let p = step_parameters(
        state.r,
        state.log_eps,
        &cfg.lambda,
        &cfg.psi,
        cfg.delta,
        cfg.zeta,
        cfg.kappa,
    )?;
    let n = p.ln_n.exp().max(1.0);
    let mut r_big = p.ln_r_factor.exp();
    let mut r_second = p.r_next;
    if cfg.mode == Mode::Practical && r_big < 2.0 {
        r_big = 2.0;
        // Radius loss recomputed for the clamped truncation order.
        let dec = ((50.0 * cfg.delta * state.log_eps.abs() / std::f64::consts::PI).ln()
            - cfg.lambda.eval_ln((r_big * n).ln()))
        .exp();
        r_second = state.r - dec;
    }
    if !n.is_finite() || !r_big.is_finite() {
        return Err(numerical(
            "step parameters overflow double precision; validate paper-scale schedules symbolically",
        ));
    }
    if !(r_second > 0.0) {
        return Err(numerical(format!(
            "radius budget exhausted: r'' = {r_second:.3e}"
        )));
    }
    let kappa2 = cfg.kappa / cfg.psi.eval(3.0 * r_big * n);
    Ok(StepGeometry { n, r_big, kappa2, r_second })
}

#[derive(Debug, Clone, Serialize)]
pub struct BasicReport {
    pub gate_ok: bool,
    pub gate_bound: f64,
    pub mean_norm: f64,
    /// kappa' actually used by the solver (clamped to the elliptic gap).
    pub kappa_solve: f64,
    pub x_norm: f64,
    pub f_out_norm: f64,
    pub br_ok: bool,
    pub br_margin: f64,
    /// Weighted-norm defect of the defining relation of the step.
    pub defrel_residual: f64,
    pub estimate_flagged: bool,
}

/// Exponentials of +-X with a tolerance tied to |X|^2: the conjugated
/// perturbation is quadratic in X, so the truncation of e^X must stay below
/// that scale even when |X| itself is far under the absolute tolerance.
fn exp_pair(
    x: &MatrixSeries,
    lam: &WeightSpec,
    r: f64,
    cfg: &StepConfig,
) -> Result<(MatrixSeries, MatrixSeries)> {
    let nx = x.weighted_norm(lam, r);
    let tol = (nx * nx * 1e-3).clamp(1e-320, cfg.exp_tol());
    Ok((exp_series(x, lam, r, tol)?, exp_series(&x.scale(-1.0), lam, r, tol)?))
}

fn mean_to_sl2(mean: &Mat2, scale: f64) -> Result<Sl2> {
    if mean.imag_norm() > 1e-10 * scale.max(1e-300) {
        return Err(numerical(format!(
            "mean coefficient has imaginary part {:.3e}",
            mean.imag_norm()
        )));
    }
    let m = mean.real_part();
    if (m[0][0] + m[1][1]).abs() > 1e-10 * scale.max(1e-300) {
        return Err(numerical("mean coefficient is not traceless"));
    }
    Ok(Sl2::new(0.5 * (m[0][0] - m[1][1]), m[0][1], m[1][0]))
}

/// One conjugation step without renormalization: solve the linearized
/// equation at order 3 N~, absorb the mean into the constant part, and
/// push the perturbation through e^X.
pub fn step_basic(
    a_tilde: &Sl2,
    f: &MatrixSeries,
    freq: &FrequencyVector,
    r: f64,
    r_prime: f64,
    n_tilde: f64,
    kappa_p: f64,
    cfg: &StepConfig,
) -> Result<(MatrixSeries, Sl2, MatrixSeries, BasicReport)> {
    if !(r_prime > 0.0 && r_prime <= r) {
        return Err(invalid("need 0 < r' <= r"));
    }
    let lam = &cfg.lambda;
    let f_norm = f.weighted_norm(lam, r);
    let mean = f.mean();
    let gate_bound =
        (kappa_p / (32.0 * (1.0 + a_tilde.norm()))).powi(2) / cfg.psi.eval(n_tilde).powi(2);
    let gate_ok = mean.norm() <= gate_bound;
    if !gate_ok && cfg.mode == Mode::Paper {
        return Err(numerical(format!(
            "mean norm {:.3e} exceeds the step gate {:.3e}",
            mean.norm(),
            gate_bound
        )));
    }

    // The solver's elliptic branch needs the gap above its kappa; the engine
    // owns the branch choice and weakens kappa to the measured gap.
    let mut kappa_solve = kappa_p.min(0.999);
    if let SpectralClass::Elliptic { alpha } = classify_default(a_tilde).class {
        kappa_solve = kappa_solve.min(2.0 * alpha * (1.0 - 1e-12));
    }
    let (x, divrep) =
        cohomology::solve(a_tilde, f, freq, &cfg.psi, kappa_solve, 3.0 * n_tilde)?;
    // The reality scale includes an absolute floor: rounding noise in the
    // series products is set by |A~|, not by the (possibly tiny) |F|.
    let reality_scale = f_norm.max(f.norm0()) + 1e-12 * (1.0 + a_tilde.norm());
    let a_prime = a_tilde.add(&mean_to_sl2(&mean, reality_scale)?);

    let (ex, exm) = exp_pair(&x, lam, r_prime, cfg)?;
    let sys = MatrixSeries::constant(f.d, a_tilde.to_mat2()).add(f);
    let a_prime_c = MatrixSeries::constant(f.d, a_prime.to_mat2());
    let dex = ex.derive_omega(freq);

    // The new perturbation, written so that every term is explicitly of size
    // |F| |X| or a truncation tail.  Expanding the defining relation with
    // d_omega X = [A~, X] + G, G = F^{3N~} - F^(0), gives
    //   F' = e^{-X}(F - F^{3N~}) + e^{-X} F (e^X - Id) + (e^{-X} - Id) F^(0)
    //        - e^{-X} sum_{k>=2} (1/k!) sum_{l<k} X^l G X^{k-1-l}.
    // The naive form e^{-X}(A~+F)e^X - A' - e^{-X} d_omega e^X subtracts
    // quantities of size |A~| and its rounding noise puts an absolute floor
    // under |F'|; this form keeps the error relative to |F|.
    let mut g = f.truncate(3.0 * n_tilde);
    g.remove_mean();
    let g_norm = g.weighted_norm(lam, r_prime);
    let mut tail_sum = MatrixSeries::zero(f.d, f.denom);
    let mut t_k = g.clone(); // sum_{l<k} X^l G X^{k-1-l}, currently k = 1
    let mut x_pow = x.clone();
    let mut factorial = 1.0;
    for k in 2..=60u32 {
        t_k = x.multiply(&t_k)?.add(&g.multiply(&x_pow)?);
        factorial *= k as f64;
        let term = t_k.scale(1.0 / factorial);
        tail_sum = tail_sum.add(&term);
        if term.weighted_norm(lam, r_prime) <= 1e-18 * g_norm {
            break;
        }
        x_pow = x_pow.multiply(&x)?;
    }
    let id = MatrixSeries::identity(f.d).to_denom(f.denom);
    let mut f_prime = exm
        .multiply(&f.sub(&f.truncate(3.0 * n_tilde)))?
        .add(&exm.multiply(f)?.multiply(&ex.sub(&id))?)
        .add(&exm.sub(&id).multiply(&MatrixSeries::constant(f.d, mean))?)
        .sub(&exm.multiply(&tail_sum)?);
    // Coefficients below relative double precision carry no information and
    // would let the support grow geometrically across steps.
    f_prime.prune(1e-17 * f_prime.norm0());

    // Defining relation d_omega e^X = (A~+F) e^X - e^X (A'+F'), checked with
    // the produced F': the defect measures the exponential truncation.
    let defrel = dex
        .sub(&sys.multiply(&ex)?)
        .add(&ex.multiply(&a_prime_c.add(&f_prime))?)
        .weighted_norm(lam, r_prime);

    let br = is_br_spectrum(&a_prime, freq, &cfg.psi, 0.75 * kappa_p, n_tilde)?;
    if cfg.mode == Mode::Paper && !br.pass {
        return Err(numerical(format!(
            "constant part lost the non-resonance margin ({:.3e})",
            br.margin
        )));
    }
    let report = BasicReport {
        gate_ok,
        gate_bound,
        mean_norm: mean.norm(),
        kappa_solve,
        x_norm: x.weighted_norm(lam, r_prime),
        f_out_norm: f_prime.weighted_norm(lam, r_prime),
        br_ok: br.pass,
        br_margin: br.margin,
        defrel_residual: defrel,
        estimate_flagged: divrep.flagged,
    };
    Ok((x, a_prime, f_prime, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Branch {
    Nonresonant,
    Resonant,
}

#[derive(Debug, Clone)]
pub struct RenormStepReport {
    pub branch: Branch,
    pub phi: Option<TrivialMap>,
    pub geometry: StepGeometry,
    pub basic: BasicReport,
    pub c0_m: f64,
    pub norm_a_before: f64,
    pub norm_a_after: f64,
    /// |A1| <= |A| + eps^{23/24} + pi N.
    pub growth_ok: bool,
    /// Resonant branch: |A1| <= (3/4) kappa''.
    pub resonant_small_ok: Option<bool>,
    /// |psi^{-1} F1 psi|_{r'} <= eps^{5/4}.
    pub contraction_ok: bool,
    pub renorm_conj_residual: f64,
}

/// Inductive step with renormalization: remove the resonance of the constant
/// part, absorb the trivial map into psi, and run one basic step at order RN.
pub fn step_renorm(
    state: &ReductionState,
    freq: &FrequencyVector,
    cfg: &StepConfig,
) -> Result<(ReductionState, MatrixSeries, MatrixSeries, RenormStepReport)> {
    let geom = derive_geometry(state, cfg)?;
    let eps = state.log_eps.exp();
    let (phi, a_tilde, renorm_rep) = resonance::renormalize(
        &state.a,
        freq,
        &cfg.psi,
        cfg.kappa,
        geom.r_big,
        geom.n,
    )?;
    let resonant = renorm_rep.resonant;
    let c0_m = renorm_rep.c0_eff.max(1.0);
    let kappa_p = geom.kappa2 / c0_m;

    let (psi_map, psi_inv, f_tilde) = if resonant {
        (
            state.psi_map.multiply(&phi.as_series())?,
            phi.inverse_series().multiply(&state.psi_inv)?,
            conj_by_trivial(&phi, &state.f_conj, true)?,
        )
    } else {
        (state.psi_map.clone(), state.psi_inv.clone(), state.f_conj.clone())
    };

    let n_tilde = geom.r_big * geom.n;
    let r_mid = 0.5 * (state.r + geom.r_second);
    let (x, a1, f1, basic) =
        step_basic(&a_tilde, &f_tilde, freq, state.r, r_mid, n_tilde, kappa_p, cfg)?;

    // Conjugation factor in the original frame: psi' e^X psi'^{-1}.
    let (ex, exm) = exp_pair(&x, &cfg.lambda, r_mid, cfg)?;
    let z1 = reduce_torus(psi_map.multiply(&ex)?.multiply(&psi_inv)?);
    let z1_inv = reduce_torus(psi_map.multiply(&exm)?.multiply(&psi_inv)?);

    let norm_a_before = state.a.norm();
    let norm_a_after = a1.norm();
    let growth_bound = norm_a_before
        + (23.0 / 24.0 * state.log_eps).exp()
        + std::f64::consts::PI * geom.n;
    let growth_ok = norm_a_after <= growth_bound * (1.0 + 1e-12);
    let resonant_small_ok =
        resonant.then(|| norm_a_after <= 0.75 * geom.kappa2 * (1.0 + 1e-12));
    let contraction_ok = basic.f_out_norm <= (1.25 * state.log_eps).exp() || eps == 0.0;
    if cfg.mode == Mode::Paper && !(growth_ok && contraction_ok) {
        return Err(numerical("step estimates violated in paper mode"));
    }

    let mut m_total2 = state.m_total2.clone();
    if resonant {
        for (t, v) in m_total2.iter_mut().zip(&renorm_rep.m2) {
            *t += v;
        }
    }
    let log_eps = if basic.f_out_norm > 0.0 {
        basic.f_out_norm.ln()
    } else {
        f64::NEG_INFINITY
    };
    let state1 = ReductionState {
        a: a1,
        psi_map,
        psi_inv,
        f_conj: f1,
        r: r_mid,
        log_eps,
        k: state.k,
        m_total2,
    };
    let report = RenormStepReport {
        branch: if resonant { Branch::Resonant } else { Branch::Nonresonant },
        phi: resonant.then_some(phi),
        geometry: geom,
        basic,
        c0_m,
        norm_a_before,
        norm_a_after,
        growth_ok,
        resonant_small_ok,
        contraction_ok,
        renorm_conj_residual: renorm_rep.conj_residual,
    };
    Ok((state1, z1, z1_inv, report))
}

fn reduce_torus(s: MatrixSeries) -> MatrixSeries {
    if s.denom == 2 && s.has_integer_support() {
        s.to_denom(1)
    } else {
        s
    }
}

#[derive(Debug, Clone)]
pub struct FullStepReport {
    pub renorm: RenormStepReport,
    pub extra_basics: Vec<BasicReport>,
    /// Constant-frame residual of the whole step conjugation.
    pub step_residual: f64,
    pub psi_norm: f64,
    pub psi_bound_ok: bool,
    pub z_dist: f64,
    pub z_near_id_ok: bool,
    pub log_eps_before: f64,
    pub log_eps_after: f64,
    pub smallness_ok: bool,
}

/// The composite iterative step: one renormalized step followed by l-1 basic
/// steps on the shrinking radius ladder, with the conjugation composed in the
/// original frame.
pub fn full_step(
    state: &ReductionState,
    freq: &FrequencyVector,
    cfg: &StepConfig,
) -> Result<(ReductionState, MatrixSeries, MatrixSeries, FullStepReport)> {
    let log_eps_before = state.log_eps;
    let smallness_ok = if cfg.mode == Mode::Paper {
        let rep = crate::weights::check_smallness(
            state.log_eps,
            cfg.kappa,
            1.0,
            cfg.zeta,
            cfg.delta,
            cfg.l,
        );
        if !rep.all_pass {
            return Err(numerical("smallness threshold violated in paper mode"));
        }
        true
    } else {
        crate::weights::check_smallness(state.log_eps, cfg.kappa, 1.0, cfg.zeta, cfg.delta, cfg.l)
            .all_pass
    };

    let f_before = state.f_conj.clone();
    let a_before = state.a;
    let (mut cur, z1, z1_inv, renorm_rep) = step_renorm(state, freq, cfg)?;
    let geom = renorm_rep.geometry;
    let n_tilde = geom.r_big * geom.n;
    let r_mid = 0.5 * (state.r + geom.r_second);
    let lam = cfg.lambda.clone();

    // Accumulated inner exponential product E with psi' E psi'^{-1} = Z'.
    let mut z_total = z1;
    let mut z_total_inv = z1_inv;
    let mut extra = Vec::new();
    let kappa2 = geom.kappa2;
    let c0_m = renorm_rep.c0_m;
    for j in 1..cfg.l {
        let kappa_j = 0.75f64.powi(j as i32) * kappa2 / c0_m;
        let r_from = r_mid - (j - 1) as f64 * (state.r - geom.r_second) / (2.0 * cfg.l as f64);
        let r_to = r_mid - j as f64 * (state.r - geom.r_second) / (2.0 * cfg.l as f64);
        let norm_before = cur.f_conj.weighted_norm(&lam, r_from);
        if norm_before == 0.0 {
            break;
        }
        let (x, a_next, f_next, rep) =
            step_basic(&cur.a, &cur.f_conj, freq, r_from, r_to, n_tilde, kappa_j, cfg)?;
        if rep.f_out_norm >= norm_before && rep.f_out_norm > 1e-290 {
            return Err(numerical(format!(
                "perturbation norm failed to contract at sub-step {j}: {:.3e} -> {:.3e}",
                norm_before, rep.f_out_norm
            )));
        }
        let (ex, exm) = exp_pair(&x, &lam, r_to, cfg)?;
        z_total = z_total.multiply(&reduce_torus(
            cur.psi_map.multiply(&ex)?.multiply(&cur.psi_inv)?,
        ))?;
        z_total_inv = reduce_torus(cur.psi_map.multiply(&exm)?.multiply(&cur.psi_inv)?)
            .multiply(&z_total_inv)?;
        z_total.prune(1e-17 * z_total.norm0());
        z_total_inv.prune(1e-17 * z_total_inv.norm0());
        cur.a = a_next;
        cur.f_conj = f_next;
        cur.r = r_to;
        cur.log_eps = if rep.f_out_norm > 0.0 { rep.f_out_norm.ln() } else { f64::NEG_INFINITY };
        extra.push(rep);
    }
    cur.r = geom.r_second;
    cur.k = state.k + 1;
    let norm_after = cur.f_conj.weighted_norm(&lam, cur.r);
    if norm_after >= log_eps_before.exp() && norm_after > 0.0 {
        return Err(numerical(format!(
            "perturbation norm grew over the step: {:.3e} -> {:.3e}",
            log_eps_before.exp(),
            norm_after
        )));
    }
    cur.log_eps = if norm_after > 0.0 { norm_after.ln() } else { f64::NEG_INFINITY };

    // Master correctness check in the original frame: V = Z' psi maps the
    // old system to the new one.
    let step_residual = conjugation_defect(
        &a_before,
        &f_before,
        &state.psi_map,
        &cur.a,
        &cur.f_conj,
        &cur.psi_map,
        &z_total,
        freq,
        &lam,
        cur.r,
    )?;
    if step_residual > cfg.residual_tol * (1.0 + a_before.norm()) {
        return Err(numerical(format!(
            "conjugation residual {step_residual:.3e} exceeds tolerance"
        )));
    }

    let eps = log_eps_before.exp();
    let psi_norm = cur
        .psi_map
        .weighted_norm(&lam, cur.r)
        .max(cur.psi_inv.weighted_norm(&lam, cur.r));
    let psi_bound_ok = psi_norm <= (-2.0 * cfg.delta * cfg.zeta * log_eps_before).exp();
    let z_dist = z_total
        .sub(&MatrixSeries::identity(z_total.d).to_denom(z_total.denom))
        .weighted_norm(&lam, cur.r)
        .max(
            z_total_inv
                .sub(&MatrixSeries::identity(z_total.d).to_denom(z_total_inv.denom))
                .weighted_norm(&lam, cur.r),
        );
    let z_near_id_ok = z_dist <= eps.powf(0.9) * (1.0 + 1e-12);
    if cfg.mode == Mode::Paper && !(psi_bound_ok && z_near_id_ok) {
        return Err(numerical("conjugation growth bounds violated in paper mode"));
    }

    let report = FullStepReport {
        renorm: renorm_rep,
        extra_basics: extra,
        step_residual,
        psi_norm,
        psi_bound_ok,
        z_dist,
        z_near_id_ok,
        log_eps_before,
        log_eps_after: cur.log_eps,
        smallness_ok,
    };
    Ok((cur, z_total, z_total_inv, report))
}

/// Defect of the master conjugation identity for one composite step: with
/// V = Z psi_new and the old system read in the psi_old frame,
///   d_omega V = S_old V - V (A_new + G_new),
/// where S_old = psi_old (A_old + G_old) psi_old^{-1} + (d_omega psi_old)
/// psi_old^{-1}.  The frame change uses the adjugate inverse of psi_old,
/// exact because the accumulated map has determinant 1.
#[allow(clippy::too_many_arguments)]
fn conjugation_defect(
    a_old: &Sl2,
    g_old: &MatrixSeries,
    psi_old: &MatrixSeries,
    a_new: &Sl2,
    g_new: &MatrixSeries,
    psi_new: &MatrixSeries,
    z: &MatrixSeries,
    freq: &FrequencyVector,
    lambda: &WeightSpec,
    r: f64,
) -> Result<f64> {
    let d = g_old.d;
    let v = z.to_denom(2).multiply(psi_new)?;
    let u = adjugate_series(psi_old).multiply(&v)?;
    let sys_new = MatrixSeries::constant(d, a_new.to_mat2()).add(g_new).to_denom(2);
    let sys_old = MatrixSeries::constant(d, a_old.to_mat2()).add(g_old).to_denom(2);
    let s_old_v = psi_old
        .multiply(&sys_old)?
        .multiply(&u)?
        .add(&psi_old.derive_omega(freq).multiply(&u)?);
    let res = v.derive_omega(freq).sub(&s_old_v).add(&v.multiply(&sys_new)?);
    Ok(res.weighted_norm(lambda, r))
}

/// Entrywise adjugate: the exact pointwise inverse of an SL(2)-valued series.
fn adjugate_series(s: &MatrixSeries) -> MatrixSeries {
    let mut adj = MatrixSeries::zero(s.d, s.denom);
    for (h, m) in s.iter() {
        adj.set_coeff(h.clone(), Mat2::new(m.e[1][1], -m.e[0][1], -m.e[1][0], m.e[0][0]));
    }
    adj
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub k: u32,
    pub branch: Branch,
    pub log_eps_before: f64,
    pub log_eps_after: f64,
    pub r: f64,
    pub n: f64,
    pub r_factor: f64,
    pub norm_a: f64,
    pub resonance_m: Vec<i64>,
    pub residual: f64,
    pub estimate_flags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Outcome {
    ReducibleCandidate,
    RecurrentResonances,
    /// A step failed numerically; the trace holds the records up to the
    /// failure and `aborted` carries the message.
    Aborted,
}

#[derive(Debug, Clone)]
pub struct ReductionTrace {
    pub records: Vec<TraceRecord>,
    pub reports: Vec<FullStepReport>,
    pub z_total: MatrixSeries,
    pub z_total_inv: MatrixSeries,
    pub final_state: ReductionState,
    pub outcome: Outcome,
    /// |A_k| <= kappa eps_k^zeta events observed on resonant branches.
    pub resonance_norm_events: Vec<(u32, f64, f64)>,
    /// The step error message when the run aborted mid-iteration.
    pub aborted: Option<String>,
}

impl ReductionTrace {
    /// Line-delimited JSON, one record per step.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("trace serialization"));
            out.push('\n');
        }
        out
    }
}

impl TraceRecord {
    /// Flattens a step report into the serialized trace row.
    pub fn from_step(k: u32, rep: &FullStepReport, next: &ReductionState) -> TraceRecord {
        let mut flags = Vec::new();
        if !rep.renorm.basic.gate_ok {
            flags.push("mean-gate".to_string());
        }
        if !rep.renorm.growth_ok {
            flags.push("norm-growth".to_string());
        }
        if !rep.renorm.contraction_ok {
            flags.push("contraction-target".to_string());
        }
        if !rep.psi_bound_ok {
            flags.push("psi-growth".to_string());
        }
        if !rep.z_near_id_ok {
            flags.push("z-near-id".to_string());
        }
        if !rep.smallness_ok {
            flags.push("smallness".to_string());
        }
        if rep.renorm.basic.estimate_flagged {
            flags.push("divisor-estimate".to_string());
        }
        TraceRecord {
            k,
            branch: rep.renorm.branch,
            log_eps_before: rep.log_eps_before,
            log_eps_after: rep.log_eps_after,
            r: next.r,
            n: rep.renorm.geometry.n,
            r_factor: rep.renorm.geometry.r_big,
            norm_a: next.a.norm(),
            resonance_m: rep.renorm.phi.as_ref().map(|p| p.m2.clone()).unwrap_or_default(),
            residual: rep.step_residual,
            estimate_flags: flags,
        }
    }
}

/// Number of trailing nonresonant steps that marks a reducible candidate.
pub const CANDIDATE_WINDOW: u32 = 5;

/// Runs the iteration until the perturbation is below target or the step
/// budget runs out, composing the full conjugation and classifying the
/// dichotomy branch.
pub fn almost_reduce(
    a0: Sl2,
    f0: MatrixSeries,
    r0: f64,
    freq: &FrequencyVector,
    cfg: &StepConfig,
) -> Result<ReductionTrace> {
    let d = f0.d;
    if d != freq.dim() {
        return Err(invalid("dimension mismatch"));
    }
    let mut state = ReductionState::initial(a0, f0, r0, &cfg.lambda)?;
    let mut z_total = MatrixSeries::identity(d);
    let mut z_total_inv = MatrixSeries::identity(d);
    let mut records = Vec::new();
    let mut reports = Vec::new();
    let mut events = Vec::new();
    let mut trailing_nonres = 0u32;

    let mut aborted = None;
    while state.log_eps > cfg.target_log_eps && state.k < cfg.max_steps && !state.f_conj.is_zero()
    {
        let (next, z, z_inv, rep) = match full_step(&state, freq, cfg) {
            Ok(step) => step,
            Err(e) => {
                // Keep the partial trace: downstream consumers decide
                // whether a truncated run is still useful.
                aborted = Some(e.to_string());
                break;
            }
        };
        records.push(TraceRecord::from_step(state.k, &rep, &next));
        if rep.renorm.branch == Branch::Resonant {
            trailing_nonres = 0;
            events.push((
                next.k,
                next.a.norm(),
                cfg.kappa * (cfg.zeta * rep.log_eps_before).exp(),
            ));
        } else {
            trailing_nonres += 1;
        }
        z_total = reduce_torus(z_total.multiply(&z)?);
        z_total_inv = reduce_torus(z_inv.multiply(&z_total_inv)?);
        reports.push(rep);
        state = next;
    }

    let steps = state.k;
    let outcome = if aborted.is_some() {
        Outcome::Aborted
    } else if steps == 0 || trailing_nonres >= CANDIDATE_WINDOW.min(steps) {
        Outcome::ReducibleCandidate
    } else {
        Outcome::RecurrentResonances
    };
    Ok(ReductionTrace {
        records,
        reports,
        z_total,
        z_total_inv,
        final_state: state,
        outcome,
        resonance_norm_events: events,
        aborted,
    })
}

/// The reducible part of the final system in the original frame:
/// A-bar = psi A psi^{-1} + (d_omega psi) psi^{-1}.
pub fn reducible_part(trace: &ReductionTrace, freq: &FrequencyVector) -> Result<MatrixSeries> {
    let st = &trace.final_state;
    let ac = MatrixSeries::constant(st.f_conj.d, st.a.to_mat2()).to_denom(2);
    let bar = st
        .psi_map
        .multiply(&ac)?
        .multiply(&st.psi_inv)?
        .add(&st.psi_map.derive_omega(freq).multiply(&st.psi_inv)?);
    Ok(reduce_torus(bar))
}

/// The perturbation in the original frame: F-bar = psi F_conj psi^{-1}.
pub fn perturbation_original_frame(trace: &ReductionTrace) -> Result<MatrixSeries> {
    let st = &trace.final_state;
    Ok(reduce_torus(st.psi_map.multiply(&st.f_conj)?.multiply(&st.psi_inv)?))
}

#[derive(Debug, Clone)]
pub struct DensityResult {
    pub h: MatrixSeries,
    pub trace: ReductionTrace,
    /// |H - G| at the final radius.
    pub defect: f64,
    /// Residual of d_omega (Z psi) = H (Z psi) - (Z psi) A_eps.
    pub reduction_residual: f64,
}

/// Produces a reducible system H close to G by subtracting the conjugated
/// final perturbation: H = G - Z F-bar Z^{-1}.
pub fn density_approximant(
    g: &MatrixSeries,
    a: Sl2,
    r0: f64,
    freq: &FrequencyVector,
    cfg: &StepConfig,
    eps_target: f64,
) -> Result<DensityResult> {
    let f0 = g.sub(&MatrixSeries::constant(g.d, a.to_mat2()));
    let mut cfg = cfg.clone();
    cfg.target_log_eps = cfg.target_log_eps.min(eps_target.max(1e-300).ln());
    let trace = almost_reduce(a, f0, r0, freq, &cfg)?;
    if let Some(msg) = &trace.aborted {
        return Err(numerical(format!("reduction aborted: {msg}")));
    }
    let st = &trace.final_state;
    let fbar = perturbation_original_frame(&trace)?;
    let correction = trace
        .z_total
        .multiply(&fbar)?
        .multiply(&trace.z_total_inv)?;
    let h = g.sub(&correction);
    let defect = correction.weighted_norm(&cfg.lambda, st.r);

    // H is reducible to the constant A_eps by V = Z psi.
    let v = trace.z_total.to_denom(2).multiply(&st.psi_map)?;
    let res = v
        .derive_omega(freq)
        .sub(&h.to_denom(2).multiply(&v)?)
        .add(&v.multiply(&MatrixSeries::constant(g.d, st.a.to_mat2()).to_denom(2))?)
        .weighted_norm(&cfg.lambda, st.r);
    Ok(DensityResult { h, trace, defect, reduction_residual: res })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOLDEN: f64 = 0.6180339887498949;

    fn freq1() -> FrequencyVector {
        FrequencyVector::new(vec![GOLDEN]).unwrap()
    }

    fn practical_cfg() -> StepConfig {
        StepConfig::practical(
            1.1,
            0.01,
            3,
            0.5,
            WeightSpec::analytic(),
            ApproxSpec::power(2.0).unwrap(),
        )
        .unwrap()
    }

    fn single_mode_f(amp: f64) -> MatrixSeries {
        let mut f = MatrixSeries::zero(1, 1);
        f.add_real_mode(vec![1], Mat2::from_real(0.3, 1.0, -0.7, -0.3).scale_re(0.5 * amp));
        f
    }

    #[test]
    fn step_basic_zero_perturbation() {
        let cfg = practical_cfg();
        let a = Sl2::rotation(0.4);
        let f = MatrixSeries::zero(1, 1);
        let (x, ap, fp, _) =
            step_basic(&a, &f, &freq1(), 0.1, 0.05, 10.0, 0.05, &cfg).unwrap();
        assert!(x.is_zero());
        assert!(ap.sub(&a).norm() == 0.0);
        assert!(fp.is_zero());
    }

    #[test]
    fn step_basic_constant_perturbation() {
        let cfg = practical_cfg();
        let a = Sl2::rotation(0.4);
        let c = Sl2::new(1e-6, 2e-6, -1e-6);
        let f = MatrixSeries::constant(1, c.to_mat2());
        let (x, ap, fp, rep) =
            step_basic(&a, &f, &freq1(), 0.1, 0.05, 10.0, 0.05, &cfg).unwrap();
        assert!(x.is_zero());
        assert!(ap.sub(&a.add(&c)).norm() < 1e-18);
        assert!(fp.norm0() < 1e-18);
        assert!(rep.defrel_residual < 1e-15);
    }

    #[test]
    fn step_basic_single_mode_contracts() {
        let cfg = practical_cfg();
        let a = Sl2::rotation(0.4);
        let f = single_mode_f(1e-5);
        let (r, rp) = (0.1, 0.05);
        let fnorm = f.weighted_norm(&cfg.lambda, r);
        let (_, _, fp, rep) =
            step_basic(&a, &f, &freq1(), r, rp, 10.0, 0.05, &cfg).unwrap();
        let fpnorm = fp.weighted_norm(&cfg.lambda, rp);
        assert!(fpnorm <= fnorm.powf(1.3), "decay {fpnorm:.3e} vs {:.3e}", fnorm.powf(1.3));
        assert!(rep.defrel_residual <= 1e-10);
        assert!(rep.br_ok);
    }

    #[test]
    fn step_renorm_nonresonant_collapses_to_basic() {
        let cfg = practical_cfg();
        let a = Sl2::rotation(0.4);
        let f = single_mode_f(1e-4);
        let state = ReductionState::initial(a, f, 0.1, &cfg.lambda).unwrap();
        let (s1, _, _, rep) = step_renorm(&state, &freq1(), &cfg).unwrap();
        assert_eq!(rep.branch, Branch::Nonresonant);
        assert!(rep.phi.is_none());
        // |A1 - A| is exactly the absorbed mean of the conjugated F.
        assert!((s1.a.sub(&a).norm() - rep.basic.mean_norm).abs() < 1e-18);
    }

    #[test]
    fn step_renorm_resonant_small_constant() {
        let cfg = practical_cfg();
        // The resonant-branch norm bound |A1| <= (3/4) kappa'' needs the
        // perturbation well below kappa'' (the smallness hypothesis).
        let f = single_mode_f(1e-12);
        let state0 = ReductionState::initial(Sl2::rotation(0.4), f.clone(), 0.1, &cfg.lambda)
            .unwrap();
        let geom = derive_geometry(&state0, &cfg).unwrap();
        let alpha = std::f64::consts::PI * GOLDEN + 0.1 * geom.kappa2;
        let state = ReductionState::initial(Sl2::rotation(alpha), f, 0.1, &cfg.lambda).unwrap();
        let (s1, _, _, rep) = step_renorm(&state, &freq1(), &cfg).unwrap();
        assert_eq!(rep.branch, Branch::Resonant);
        assert!(rep.resonant_small_ok.unwrap(), "|A1| = {:.3e}", s1.a.norm());
        assert_eq!(s1.m_total2, vec![1]);
    }

    #[test]
    fn step_renorm_resonant_zero_perturbation() {
        let cfg = practical_cfg();
        let f = single_mode_f(1e-8);
        let mut state = ReductionState::initial(Sl2::rotation(0.4), f, 0.1, &cfg.lambda).unwrap();
        state.f_conj = MatrixSeries::zero(1, 1);
        state.log_eps = -60.0;
        let geom = derive_geometry(&state, &cfg).unwrap();
        state.a = Sl2::rotation(std::f64::consts::PI * GOLDEN + 0.1 * geom.kappa2);
        let (s1, z1, _, rep) = step_renorm(&state, &freq1(), &cfg).unwrap();
        assert_eq!(rep.branch, Branch::Resonant);
        assert!(s1.f_conj.is_zero());
        // e^X = Id, so Z1 = psi' psi'^{-1} = Id.
        assert!(z1.sub(&MatrixSeries::identity(1).to_denom(z1.denom)).norm0() < 1e-12);
    }

    #[test]
    fn full_step_contracts_and_verifies() {
        let cfg = practical_cfg();
        let a = Sl2::rotation(0.4);
        let f = single_mode_f(1e-4);
        let state = ReductionState::initial(a, f, 0.1, &cfg.lambda).unwrap();
        let (s1, _, _, rep) = full_step(&state, &freq1(), &cfg).unwrap();
        let before = state.log_eps.exp();
        let after = s1.log_eps.exp();
        assert!(after <= before.powf(1.5), "decay {after:.3e} vs {:.3e}", before.powf(1.5));
        assert!(rep.step_residual <= 1e-9);
        assert_eq!(s1.k, 1);
    }

    #[test]
    fn almost_reduce_zero_perturbation() {
        let cfg = practical_cfg();
        let trace = almost_reduce(
            Sl2::rotation(0.4),
            MatrixSeries::zero(1, 1),
            0.1,
            &freq1(),
            &cfg,
        )
        .unwrap();
        assert!(trace.records.is_empty());
        assert_eq!(trace.outcome, Outcome::ReducibleCandidate);
        assert!(trace.z_total.sub(&MatrixSeries::identity(1)).norm0() == 0.0);
    }

    #[test]
    fn almost_reduce_scenario_contracts_to_target() {
        let cfg = practical_cfg();
        let a = Sl2::rotation(0.4);
        let f = single_mode_f(1e-4);
        let trace = almost_reduce(a, f, 0.1, &freq1(), &cfg).unwrap();
        assert!(trace.final_state.log_eps <= cfg.target_log_eps);
        assert!(trace.records.len() <= 4, "took {} steps", trace.records.len());
        assert_eq!(trace.outcome, Outcome::ReducibleCandidate);
        for rec in &trace.records {
            assert!(rec.residual <= 1e-9);
        }
        // Monotone contraction with exponent 1.2.
        for w in trace.records.windows(2) {
            assert!(w[1].log_eps_before <= 1.2 * w[0].log_eps_before);
        }
        // Trace serialization round-trips as JSON lines.
        let text = trace.to_jsonl();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("branch").is_some());
        }
    }

    #[test]
    fn density_approximant_bounds() {
        let cfg = practical_cfg();
        let a = Sl2::rotation(0.4);
        let g = MatrixSeries::constant(1, a.to_mat2()).add(&single_mode_f(1e-4));
        let out = density_approximant(&g, a, 0.1, &freq1(), &cfg, 1e-12).unwrap();
        let st = &out.trace.final_state;
        let fbar = perturbation_original_frame(&out.trace).unwrap();
        let fbar_norm = fbar.weighted_norm(&cfg.lambda, st.r);
        assert!(out.defect <= 4.0 * fbar_norm * (1.0 + 1e-9) || out.defect < 1e-14);
        assert!(out.reduction_residual <= 1e-9, "residual {:.3e}", out.reduction_residual);
        // G = constant A: H = G and the reduction is trivial.
        let g0 = MatrixSeries::constant(1, a.to_mat2());
        let triv = density_approximant(&g0, a, 0.1, &freq1(), &cfg, 1e-12).unwrap();
        assert!(triv.h.sub(&g0).norm0() == 0.0);
    }
}
