//! Command-line front end.  Exit-code contract: 0 = all checks pass,
//! 2 = usage/configuration error, 3 = a numerical check failed or the
//! computation aborted.  Every failure path prints a machine-readable JSON
//! error record on stderr; data outputs are deterministic for a fixed
//! configuration and seed.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::json;

use crate::config::{PsiChoice, RunConfig};
use crate::engine::{self, Outcome};
use crate::fourier::MatrixSeries;
use crate::lab::{self, CocycleSystem};
use crate::weights;
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Captured command result; `run` prints it, tests inspect it directly.
#[derive(Debug)]
pub struct CmdOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn run(args: &[String]) -> i32 {
    let out = dispatch(args);
    print!("{}", out.stdout);
    eprint!("{}", out.stderr);
    out.code
}

pub fn dispatch(args: &[String]) -> CmdOutput {
    let Some(cmd) = args.first() else {
        return usage_failure("missing subcommand", true);
    };
    match cmd.as_str() {
        "check-freq" => cmd_check_freq(&args[1..]),
        "schedule" => cmd_schedule(&args[1..]),
        "reduce" => cmd_reduce(&args[1..]),
        "verify" => cmd_verify(&args[1..]),
        "lyapunov" => cmd_lyapunov(&args[1..]),
        "help" | "--help" | "-h" => CmdOutput {
            code: EXIT_OK,
            stdout: usage_text(),
            stderr: String::new(),
        },
        other => usage_failure(&format!("unknown subcommand `{other}`"), true),
    }
}

fn usage_text() -> String {
    "\
usage: kamred <command> [flags]

commands:
  check-freq  --omega w1,w2,..  [--psi power:TAU] [--order K] [--min-kappa X]
              Scan |<k,omega>| psi(|k|) over 0 < |k| <= K; prints a JSON
              report with kappa_max and the worst lattice vector.  Exits 3
              when --min-kappa is given and kappa_max falls below it.
  schedule    [--lambda SPEC] [--psi SPEC] [--delta D] [--zeta Z] [--kappa X]
              [--r0 R] [--log10-eps0 E] [--steps K]
              Prints the radius schedule as CSV (k,log_eps,r,n,r_factor)
              followed by a JSON summary with the convergence integral.
  reduce      --config FILE
              Runs the reduction; writes trace.jsonl, summary.txt and the
              final series files into the configured output directory.
              Exits 0 iff every step residual passes the configured bound.
  verify      --config FILE [--z FILE] [--after-config FILE] [--grid N]
              [--tol T]
              Pointwise conjugation check between the two configured
              systems; prints a JSON report with the max residual.
  lyapunov    --config FILE [--t T] [--h H] [--samples N]
              Prints per-sample CSV rows (theta,T,log_norm,rotation) and a
              trailing JSON summary line with mean and standard error.
"
    .to_string()
}

fn error_record(kind: &str, message: &str) -> String {
    format!("{}\n", json!({ "error": kind, "message": message }))
}

fn usage_failure(message: &str, with_usage: bool) -> CmdOutput {
    CmdOutput {
        code: EXIT_USAGE,
        stdout: if with_usage { usage_text() } else { String::new() },
        stderr: error_record("usage", message),
    }
}

fn failure_from(err: &Error) -> CmdOutput {
    let (kind, code) = match err {
        Error::Invalid(_) | Error::Parse(_) | Error::Io(_) => ("usage", EXIT_USAGE),
        Error::Numerical(_) => ("numerical", EXIT_NUMERICAL),
    };
    CmdOutput {
        code,
        stdout: String::new(),
        stderr: error_record(kind, &err.to_string()),
    }
}

/// `--flag value` pairs; unknown and repeated flags are usage errors.
struct Flags(Vec<(String, String)>);

impl Flags {
    fn parse(args: &[String], allowed: &[&str]) -> Result<Flags, String> {
        let mut out = Vec::new();
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let Some(name) = arg.strip_prefix("--") else {
                return Err(format!("expected a --flag, got `{arg}`"));
            };
            if !allowed.contains(&name) {
                return Err(format!("unknown flag --{name}"));
            }
            if out.iter().any(|(n, _)| n == name) {
                return Err(format!("flag --{name} given twice"));
            }
            let Some(value) = it.next() else {
                return Err(format!("flag --{name} needs a value"));
            };
            out.push((name.to_string(), value.clone()));
        }
        Ok(Flags(out))
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_str())
    }

    fn get_f64(&self, name: &str, default: f64) -> Result<f64, String> {
        match self.get(name) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| format!("--{name}: bad number `{v}`")),
        }
    }

    fn get_usize(&self, name: &str, default: usize) -> Result<usize, String> {
        match self.get(name) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| format!("--{name}: bad integer `{v}`")),
        }
    }
}

fn parse_omega(v: &str) -> Result<Vec<f64>, String> {
    v.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad omega entry `{p}`")))
        .collect()
}

fn cmd_check_freq(args: &[String]) -> CmdOutput {
    let flags = match Flags::parse(args, &["omega", "psi", "order", "min-kappa"]) {
        Ok(f) => f,
        Err(m) => return usage_failure(&m, false),
    };
    let Some(omega_raw) = flags.get("omega") else {
        return usage_failure("check-freq requires --omega", false);
    };
    let result = (|| -> crate::Result<(f64, Vec<i64>, i64)> {
        let omega = parse_omega(omega_raw).map_err(crate::Error::Parse)?;
        let freq = weights::FrequencyVector::new(omega)?;
        let psi = PsiChoice::from_value(flags.get("psi").unwrap_or("power:2"))?.build()?;
        let order = flags.get_usize("order", 1000).map_err(crate::Error::Parse)? as i64;
        let (kappa_max, worst) = weights::check_frequency(&freq, &psi, order)?;
        Ok((kappa_max, worst, order))
    })();
    let (kappa_max, worst, order) = match result {
        Ok(v) => v,
        Err(e) => return failure_from(&e),
    };
    let report = json!({ "kappa_max": kappa_max, "worst_k": worst, "order": order });
    let stdout = format!("{report}\n");
    match flags.get_f64("min-kappa", f64::NEG_INFINITY) {
        Err(m) => usage_failure(&m, false),
        Ok(min_kappa) if kappa_max < min_kappa => CmdOutput {
            code: EXIT_NUMERICAL,
            stdout,
            stderr: error_record(
                "numerical",
                &format!("kappa_max {kappa_max:.6e} below threshold {min_kappa:.6e}"),
            ),
        },
        Ok(_) => CmdOutput { code: EXIT_OK, stdout, stderr: String::new() },
    }
}

fn cmd_schedule(args: &[String]) -> CmdOutput {
    let flags = match Flags::parse(
        args,
        &["lambda", "psi", "delta", "zeta", "kappa", "r0", "log10-eps0", "steps"],
    ) {
        Ok(f) => f,
        Err(m) => return usage_failure(&m, false),
    };
    let parsed = (|| -> Result<_, String> {
        Ok((
            flags.get_f64("delta", 100000.0)?,
            flags.get_f64("zeta", 1.0 / 1728.0)?,
            flags.get_f64("kappa", 0.5)?,
            flags.get_f64("r0", 1.0)?,
            flags.get_f64("log10-eps0", -4.0)?,
            flags.get_usize("steps", 20)?,
        ))
    })();
    let (delta, zeta, kappa, r0, log10_eps0, steps) = match parsed {
        Ok(v) => v,
        Err(m) => return usage_failure(&m, false),
    };
    let built = (|| -> crate::Result<_> {
        let lambda =
            crate::config::LambdaChoice::from_value(flags.get("lambda").unwrap_or("analytic"))?
                .build()?;
        let psi = PsiChoice::from_value(flags.get("psi").unwrap_or("power:2"))?.build()?;
        let integral = weights::brjuno_russmann_integral(&lambda, &psi, 1.0, 1e-10)?;
        let log_eps0 = log10_eps0 * std::f64::consts::LN_10;
        let schedule =
            weights::build_schedule(r0, log_eps0, &lambda, &psi, delta, zeta, kappa, steps)?;
        Ok((integral, schedule))
    })();
    let (integral, schedule) = match built {
        Ok(v) => v,
        Err(e) => return failure_from(&e),
    };
    let mut stdout = String::from("k,log_eps,r,n,r_factor\n");
    for row in &schedule.rows {
        writeln!(
            stdout,
            "{},{:.12e},{:.12e},{:.12e},{:.12e}",
            row.k, row.log_eps, row.r, row.n, row.r_factor
        )
        .unwrap();
    }
    let summary = json!({
        "br_integral": integral,
        "r_limit": schedule.r_limit,
        "radius_spent": schedule.radius_spent,
        "loss_bound": schedule.loss_bound,
        "assumption_ok": schedule.assumption_ok,
        "failure_at": schedule.failure_at,
    });
    writeln!(stdout, "{summary}").unwrap();
    if schedule.assumption_ok && schedule.failure_at.is_none() {
        CmdOutput { code: EXIT_OK, stdout, stderr: String::new() }
    } else {
        CmdOutput {
            code: EXIT_NUMERICAL,
            stdout,
            stderr: error_record("numerical", "radius schedule does not stay positive"),
        }
    }
}

fn load_config(flags: &Flags) -> Result<RunConfig, CmdOutput> {
    let Some(path) = flags.get("config") else {
        return Err(usage_failure("missing --config", false));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage_failure(&format!("cannot read {path}: {e}"), false))?;
    RunConfig::parse(&text).map_err(|e| failure_from(&e))
}

fn cmd_reduce(args: &[String]) -> CmdOutput {
    let flags = match Flags::parse(args, &["config"]) {
        Ok(f) => f,
        Err(m) => return usage_failure(&m, false),
    };
    let cfg = match load_config(&flags) {
        Ok(c) => c,
        Err(out) => return out,
    };
    let built = (|| -> crate::Result<_> {
        let freq = cfg.frequency()?;
        let a = cfg.constant_part();
        let f = cfg.perturbation()?;
        let step_cfg = cfg.step_config()?;
        Ok((freq, a, f, step_cfg))
    })();
    let (freq, a, f, step_cfg) = match built {
        Ok(v) => v,
        Err(e) => return failure_from(&e),
    };
    let out_dir = Path::new(&cfg.out_dir);
    if let Err(e) = std::fs::create_dir_all(out_dir) {
        return usage_failure(&format!("cannot create {}: {e}", cfg.out_dir), false);
    }

    let trace = match engine::almost_reduce(a, f, cfg.r0, &freq, &step_cfg) {
        Ok(t) => t,
        Err(e) => return failure_from(&e),
    };

    // Artifacts: the step trace, the final series, and a human summary.
    let write = |name: &str, data: &str| -> std::io::Result<()> {
        std::fs::write(out_dir.join(name), data)
    };
    let st = &trace.final_state;
    let mut summary = String::new();
    writeln!(summary, "label            = {}", "reduction run").unwrap();
    writeln!(summary, "outcome          = {:?}", trace.outcome).unwrap();
    writeln!(summary, "steps            = {}", st.k).unwrap();
    writeln!(summary, "final_log_eps    = {:.6e}", st.log_eps).unwrap();
    writeln!(summary, "final_r          = {:.6e}", st.r).unwrap();
    writeln!(summary, "final_a          = {:.16e} {:.16e} {:.16e}", st.a.a, st.a.b, st.a.c)
        .unwrap();
    writeln!(summary, "m_total2         = {:?}", st.m_total2).unwrap();
    writeln!(summary).unwrap();
    writeln!(summary, "k  branch       log_eps_before  log_eps_after   r            residual")
        .unwrap();
    for rec in &trace.records {
        writeln!(
            summary,
            "{:<2} {:<12} {:<15.6e} {:<15.6e} {:<12.6e} {:.6e}",
            rec.k,
            format!("{:?}", rec.branch),
            rec.log_eps_before,
            rec.log_eps_after,
            rec.r,
            rec.residual
        )
        .unwrap();
    }
    if let Some(msg) = &trace.aborted {
        writeln!(summary, "aborted: {msg}").unwrap();
    }
    let io_result = write("trace.jsonl", &trace.to_jsonl())
        .and_then(|_| write("summary.txt", &summary))
        .and_then(|_| write("f_final.txt", &st.f_conj.to_text()))
        .and_then(|_| write("z_total.txt", &trace.z_total.to_text()))
        .and_then(|_| write("z_total_inv.txt", &trace.z_total_inv.to_text()));
    if let Err(e) = io_result {
        return usage_failure(&format!("cannot write outputs: {e}"), false);
    }

    if trace.outcome == Outcome::Aborted {
        return CmdOutput {
            code: EXIT_NUMERICAL,
            stdout: summary,
            stderr: error_record(
                "numerical",
                trace.aborted.as_deref().unwrap_or("reduction aborted"),
            ),
        };
    }
    let reached_target = st.log_eps <= step_cfg.target_log_eps || st.f_conj.is_zero();
    let residuals_ok = trace
        .records
        .iter()
        .all(|rec| rec.residual <= step_cfg.residual_tol * (1.0 + rec.norm_a));
    if reached_target && residuals_ok {
        CmdOutput { code: EXIT_OK, stdout: summary, stderr: String::new() }
    } else {
        let msg = if residuals_ok {
            "perturbation did not reach the target size".to_string()
        } else {
            "a step residual exceeded the configured bound".to_string()
        };
        CmdOutput { code: EXIT_NUMERICAL, stdout: summary, stderr: error_record("numerical", &msg) }
    }
}

fn system_from_config(cfg: &RunConfig) -> crate::Result<CocycleSystem> {
    let freq = cfg.frequency()?;
    CocycleSystem::new(cfg.constant_part(), cfg.perturbation()?, freq, "configured")
}

fn cmd_verify(args: &[String]) -> CmdOutput {
    let flags = match Flags::parse(args, &["config", "z", "after-config", "grid", "tol"]) {
        Ok(f) => f,
        Err(m) => return usage_failure(&m, false),
    };
    let cfg = match load_config(&flags) {
        Ok(c) => c,
        Err(out) => return out,
    };
    let grid = match flags.get_usize("grid", 64) {
        Ok(v) => v,
        Err(m) => return usage_failure(&m, false),
    };
    let tol = match flags.get_f64("tol", 1e-8) {
        Ok(v) => v,
        Err(m) => return usage_failure(&m, false),
    };
    let result = (|| -> crate::Result<f64> {
        let before = system_from_config(&cfg)?;
        let after = match flags.get("after-config") {
            None => before.clone(),
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                system_from_config(&RunConfig::parse(&text)?)?
            }
        };
        let z = match flags.get("z") {
            None => MatrixSeries::identity(before.dim()),
            Some(path) => MatrixSeries::from_text(&std::fs::read_to_string(path)?)?,
        };
        lab::verify_conjugation(&z, &before, &after, grid)
    })();
    let residual = match result {
        Ok(v) => v,
        Err(e) => return failure_from(&e),
    };
    let stdout = format!("{}\n", json!({ "residual": residual, "grid": grid, "tol": tol }));
    if residual <= tol {
        CmdOutput { code: EXIT_OK, stdout, stderr: String::new() }
    } else {
        CmdOutput {
            code: EXIT_NUMERICAL,
            stdout,
            stderr: error_record(
                "numerical",
                &format!("conjugation residual {residual:.6e} above tolerance {tol:.6e}"),
            ),
        }
    }
}

fn cmd_lyapunov(args: &[String]) -> CmdOutput {
    let flags = match Flags::parse(args, &["config", "t", "h", "samples"]) {
        Ok(f) => f,
        Err(m) => return usage_failure(&m, false),
    };
    let cfg = match load_config(&flags) {
        Ok(c) => c,
        Err(out) => return out,
    };
    let parsed = (|| -> Result<_, String> {
        Ok((
            flags.get_f64("t", 50.0)?,
            flags.get_f64("h", 1e-3)?,
            flags.get_usize("samples", 8)?,
        ))
    })();
    let (t_final, h, samples) = match parsed {
        Ok(v) => v,
        Err(m) => return usage_failure(&m, false),
    };
    let result = (|| -> crate::Result<_> {
        let sys = system_from_config(&cfg)?;
        let rows = lab::sample_rows(&sys, t_final, samples, h)?;
        let est = lab::lyapunov(&sys, t_final, samples, h)?;
        Ok((rows, est))
    })();
    let (rows, est) = match result {
        Ok(v) => v,
        Err(e) => return failure_from(&e),
    };
    let mut buf = Vec::new();
    lab::write_csv(&mut buf, &rows).expect("in-memory write");
    let mut stdout = String::from_utf8(buf).expect("csv is utf-8");
    writeln!(
        stdout,
        "{}",
        json!({ "lyapunov_mean": est.mean, "std_err": est.std_err, "seed": cfg.seed })
    )
    .unwrap();
    CmdOutput { code: EXIT_OK, stdout, stderr: String::new() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn missing_subcommand_is_usage_error() {
        let out = dispatch(&[]);
        assert_eq!(out.code, EXIT_USAGE);
        assert!(out.stderr.contains("\"error\":\"usage\""));
    }

    #[test]
    fn check_freq_golden_is_deterministic() {
        let a = dispatch(&args(&[
            "check-freq",
            "--omega",
            "0.6180339887498949",
            "--order",
            "200",
        ]));
        let b = dispatch(&args(&[
            "check-freq",
            "--omega",
            "0.6180339887498949",
            "--order",
            "200",
        ]));
        assert_eq!(a.code, EXIT_OK);
        assert_eq!(a.stdout, b.stdout);
        assert!(a.stdout.contains("kappa_max"));
    }

    #[test]
    fn check_freq_rational_fails_threshold() {
        // Rationally dependent entries: <(1,-2), omega> = 0 exactly.
        let out = dispatch(&args(&[
            "check-freq",
            "--omega",
            "0.5,0.25",
            "--order",
            "50",
            "--min-kappa",
            "1e-6",
        ]));
        assert_eq!(out.code, EXIT_NUMERICAL);
        assert!(out.stderr.contains("below threshold"));
    }

    #[test]
    fn check_freq_missing_flag_is_usage() {
        let out = dispatch(&args(&["check-freq", "--order", "10"]));
        assert_eq!(out.code, EXIT_USAGE);
    }

    #[test]
    fn schedule_paper_constants_pass() {
        // The published schedule constants need an astronomically small eps0.
        let out = dispatch(&args(&["schedule", "--r0", "1.0", "--log10-eps0", "-450000"]));
        assert_eq!(out.code, EXIT_OK, "stderr: {}", out.stderr);
        assert!(out.stdout.starts_with("k,log_eps,r,n,r_factor"));
        assert!(out.stdout.contains("br_integral"));
    }

    #[test]
    fn schedule_divergent_pair_trips_sentinel() {
        // lambda ~ ln(1+t) against psi = t^2 violates lim log psi / lambda = 0
        // and makes the convergence integral blow up.
        let mut table = String::new();
        for i in 0..230 {
            let lt = -1.0 + (i as f64) * 577.0 / 229.0;
            let t = lt.exp();
            table.push_str(&format!("{} {}\n", t, (1.0 + t).ln()));
        }
        let path = std::env::temp_dir().join("kamred_cli_slow_weight_table.txt");
        std::fs::write(&path, table).unwrap();
        let out = dispatch(&args(&[
            "schedule",
            "--lambda",
            &format!("table:{}", path.display()),
            "--psi",
            "power:2",
            "--r0",
            "0.05",
            "--log10-eps0",
            "-4",
        ]));
        std::fs::remove_file(&path).ok();
        assert_eq!(out.code, EXIT_NUMERICAL, "stdout: {}", out.stdout);
    }

    #[test]
    fn unknown_flag_rejected() {
        let out = dispatch(&args(&["schedule", "--turbo", "on"]));
        assert_eq!(out.code, EXIT_USAGE);
        assert!(out.stderr.contains("unknown flag"));
    }
}
