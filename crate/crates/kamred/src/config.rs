//! Run configuration: a line-oriented `key = value` format under `[section]`
//! headers.  Chosen for diffability and zero-dependency parsing from any
//! language; the parse/serialize round trip is lossless and unknown keys are
//! rejected outright.

use std::fmt::Write as _;

use crate::engine::{Mode, StepConfig};
use crate::fourier::MatrixSeries;
use crate::mat2::{Mat2, Sl2};
use crate::weights::{ApproxSpec, FrequencyVector, WeightSpec};
use crate::{Error, Result};

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

/// Source of the perturbation F.
#[derive(Debug, Clone, PartialEq)]
pub enum PerturbationSource {
    /// F = 0.
    None,
    /// Builtin single-cosine family: amplitude * cos(2 pi theta_1) * M with a
    /// fixed traceless stencil M.
    Cosine,
    /// A series text file (same format as the emitted series).
    File(String),
}

impl PerturbationSource {
    fn to_value(&self) -> String {
        match self {
            PerturbationSource::None => "none".to_string(),
            PerturbationSource::Cosine => "cosine".to_string(),
            PerturbationSource::File(p) => format!("file:{p}"),
        }
    }

    pub fn from_value(v: &str) -> Result<Self> {
        match v {
            "none" => Ok(PerturbationSource::None),
            "cosine" => Ok(PerturbationSource::Cosine),
            other => match other.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(PerturbationSource::File(p.to_string())),
                _ => Err(parse_err(format!("unknown perturbation source `{other}`"))),
            },
        }
    }
}

/// Weight function selector.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaChoice {
    Analytic,
    Gevrey(f64),
    Table(String),
}

impl LambdaChoice {
    fn to_value(&self) -> String {
        match self {
            LambdaChoice::Analytic => "analytic".to_string(),
            LambdaChoice::Gevrey(s) => format!("gevrey:{s}"),
            LambdaChoice::Table(p) => format!("table:{p}"),
        }
    }

    pub fn from_value(v: &str) -> Result<Self> {
        if v == "analytic" {
            return Ok(LambdaChoice::Analytic);
        }
        if let Some(s) = v.strip_prefix("gevrey:") {
            let s: f64 = s.parse().map_err(|_| parse_err("bad gevrey exponent"))?;
            return Ok(LambdaChoice::Gevrey(s));
        }
        if let Some(p) = v.strip_prefix("table:") {
            if !p.is_empty() {
                return Ok(LambdaChoice::Table(p.to_string()));
            }
        }
        Err(parse_err(format!("unknown weight function `{v}`")))
    }

    pub fn build(&self) -> Result<WeightSpec> {
        match self {
            LambdaChoice::Analytic => Ok(WeightSpec::analytic()),
            LambdaChoice::Gevrey(s) => WeightSpec::gevrey(*s),
            LambdaChoice::Table(p) => {
                let text = std::fs::read_to_string(p)?;
                WeightSpec::tabulated(&crate::weights::parse_table(&text)?)
            }
        }
    }
}

/// Approximating function selector.
#[derive(Debug, Clone, PartialEq)]
pub enum PsiChoice {
    Power(f64),
    Table(String),
}

impl PsiChoice {
    fn to_value(&self) -> String {
        match self {
            PsiChoice::Power(tau) => format!("power:{tau}"),
            PsiChoice::Table(p) => format!("table:{p}"),
        }
    }

    pub fn from_value(v: &str) -> Result<Self> {
        if let Some(tau) = v.strip_prefix("power:") {
            let tau: f64 = tau.parse().map_err(|_| parse_err("bad power exponent"))?;
            return Ok(PsiChoice::Power(tau));
        }
        if let Some(p) = v.strip_prefix("table:") {
            if !p.is_empty() {
                return Ok(PsiChoice::Table(p.to_string()));
            }
        }
        Err(parse_err(format!("unknown approximating function `{v}`")))
    }

    pub fn build(&self) -> Result<ApproxSpec> {
        match self {
            PsiChoice::Power(tau) => ApproxSpec::power(*tau),
            PsiChoice::Table(p) => {
                let text = std::fs::read_to_string(p)?;
                ApproxSpec::tabulated(&crate::weights::parse_table(&text)?)
            }
        }
    }
}

/// Full run configuration; every key has a default so that any subset of the
/// file may be given, and serialization always emits the complete key set.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [system]
    pub a_entry: f64,
    pub b_entry: f64,
    pub c_entry: f64,
    pub omega: Vec<f64>,
    pub f_source: PerturbationSource,
    pub f_amplitude: f64,
    // [weight]
    pub lambda: LambdaChoice,
    pub psi: PsiChoice,
    pub r0: f64,
    // [step]
    pub mode: Mode,
    pub delta: f64,
    pub zeta: f64,
    pub l: u32,
    pub kappa: f64,
    pub residual_tol: f64,
    pub max_steps: u32,
    pub target_log10_eps: f64,
    // [output]
    pub out_dir: String,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            a_entry: 0.0,
            b_entry: -0.4,
            c_entry: 0.4,
            omega: vec![0.618_033_988_749_894_9],
            f_source: PerturbationSource::Cosine,
            f_amplitude: 1e-4,
            lambda: LambdaChoice::Analytic,
            psi: PsiChoice::Power(2.0),
            r0: 0.1,
            mode: Mode::Practical,
            delta: 1.1,
            zeta: 0.01,
            l: 3,
            kappa: 0.5,
            residual_tol: 1e-9,
            max_steps: 40,
            target_log10_eps: -30.0,
            out_dir: "out".to_string(),
            seed: 1,
        }
    }
}

impl RunConfig {
    /// Serializes the complete key set; floats use the shortest
    /// round-tripping decimal form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "[system]").unwrap();
        writeln!(s, "a = {}", self.a_entry).unwrap();
        writeln!(s, "b = {}", self.b_entry).unwrap();
        writeln!(s, "c = {}", self.c_entry).unwrap();
        let omega: Vec<String> = self.omega.iter().map(|w| w.to_string()).collect();
        writeln!(s, "omega = {}", omega.join(",")).unwrap();
        writeln!(s, "f = {}", self.f_source.to_value()).unwrap();
        writeln!(s, "f_amplitude = {}", self.f_amplitude).unwrap();
        writeln!(s).unwrap();
        writeln!(s, "[weight]").unwrap();
        writeln!(s, "lambda = {}", self.lambda.to_value()).unwrap();
        writeln!(s, "psi = {}", self.psi.to_value()).unwrap();
        writeln!(s, "r0 = {}", self.r0).unwrap();
        writeln!(s).unwrap();
        writeln!(s, "[step]").unwrap();
        let mode = match self.mode {
            Mode::Practical => "practical",
            Mode::Paper => "paper",
        };
        writeln!(s, "mode = {}", mode).unwrap();
        writeln!(s, "delta = {}", self.delta).unwrap();
        writeln!(s, "zeta = {}", self.zeta).unwrap();
        writeln!(s, "l = {}", self.l).unwrap();
        writeln!(s, "kappa = {}", self.kappa).unwrap();
        writeln!(s, "residual_tol = {}", self.residual_tol).unwrap();
        writeln!(s, "max_steps = {}", self.max_steps).unwrap();
        writeln!(s, "target_log10_eps = {}", self.target_log10_eps).unwrap();
        writeln!(s).unwrap();
        writeln!(s, "[output]").unwrap();
        writeln!(s, "dir = {}", self.out_dir).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        s
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                match name {
                    "system" | "weight" | "step" | "output" => section = name.to_string(),
                    other => {
                        return Err(parse_err(format!(
                            "line {}: unknown section [{other}]",
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(&section, key, value).map_err(|e| {
                parse_err(format!("line {}: {}", lineno + 1, e))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let f = |v: &str| -> Result<f64> {
            v.parse::<f64>().map_err(|_| parse_err(format!("bad number `{v}`")))
        };
        let u = |v: &str| -> Result<u64> {
            v.parse::<u64>().map_err(|_| parse_err(format!("bad integer `{v}`")))
        };
        match (section, key) {
            ("system", "a") => self.a_entry = f(value)?,
            ("system", "b") => self.b_entry = f(value)?,
            ("system", "c") => self.c_entry = f(value)?,
            ("system", "omega") => {
                let parts: Result<Vec<f64>> = value.split(',').map(|p| f(p.trim())).collect();
                self.omega = parts?;
            }
            ("system", "f") => self.f_source = PerturbationSource::from_value(value)?,
            ("system", "f_amplitude") => self.f_amplitude = f(value)?,
            ("weight", "lambda") => self.lambda = LambdaChoice::from_value(value)?,
            ("weight", "psi") => self.psi = PsiChoice::from_value(value)?,
            ("weight", "r0") => self.r0 = f(value)?,
            ("step", "mode") => {
                self.mode = match value {
                    "practical" => Mode::Practical,
                    "paper" => Mode::Paper,
                    other => return Err(parse_err(format!("unknown mode `{other}`"))),
                }
            }
            ("step", "delta") => self.delta = f(value)?,
            ("step", "zeta") => self.zeta = f(value)?,
            ("step", "l") => self.l = u(value)? as u32,
            ("step", "kappa") => self.kappa = f(value)?,
            ("step", "residual_tol") => self.residual_tol = f(value)?,
            ("step", "max_steps") => self.max_steps = u(value)? as u32,
            ("step", "target_log10_eps") => self.target_log10_eps = f(value)?,
            ("output", "dir") => self.out_dir = value.to_string(),
            ("output", "seed") => self.seed = u(value)?,
            _ => {
                return Err(parse_err(format!(
                    "unknown key `{key}` in section [{section}]"
                )))
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.omega.is_empty() {
            return Err(parse_err("omega must have at least one entry"));
        }
        if !(self.r0 > 0.0) {
            return Err(parse_err("r0 must be positive"));
        }
        Ok(())
    }

    pub fn frequency(&self) -> Result<FrequencyVector> {
        FrequencyVector::new(self.omega.clone())
    }

    pub fn constant_part(&self) -> Sl2 {
        Sl2::new(self.a_entry, self.b_entry, self.c_entry)
    }

    pub fn perturbation(&self) -> Result<MatrixSeries> {
        let d = self.omega.len();
        match &self.f_source {
            PerturbationSource::None => Ok(MatrixSeries::zero(d, 1)),
            PerturbationSource::Cosine => {
                let mut f = MatrixSeries::zero(d, 1);
                let mut h = vec![0i64; d];
                h[0] = 1;
                let stencil = Mat2::from_real(0.3, 1.0, -0.7, -0.3);
                f.add_real_mode(h, stencil.scale_re(0.5 * self.f_amplitude));
                Ok(f)
            }
            PerturbationSource::File(path) => {
                let text = std::fs::read_to_string(path)?;
                let f = MatrixSeries::from_text(&text)?;
                if f.d != d {
                    return Err(parse_err("perturbation file dimension mismatch"));
                }
                Ok(f.scale(self.f_amplitude))
            }
        }
    }

    /// Builds the engine step configuration; paper mode pins the schedule
    /// constants to their published values and ignores delta/zeta/l here.
    pub fn step_config(&self) -> Result<StepConfig> {
        let lambda = self.lambda.build()?;
        let psi = self.psi.build()?;
        let mut cfg = match self.mode {
            Mode::Paper => StepConfig::paper(self.kappa, lambda, psi),
            Mode::Practical => {
                StepConfig::practical(self.delta, self.zeta, self.l, self.kappa, lambda, psi)?
            }
        };
        cfg.residual_tol = self.residual_tol;
        cfg.max_steps = self.max_steps;
        cfg.target_log_eps = self.target_log10_eps * std::f64::consts::LN_10;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trip_is_lossless() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        // And serialization is a fixed point.
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn round_trip_survives_awkward_floats() {
        let mut cfg = RunConfig::default();
        cfg.f_amplitude = 1.0000000000000002e-7;
        cfg.omega = vec![0.1234567890123456789, -0.3];
        cfg.zeta = 1.0 / 1728.0;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_rejected() {
        let text = "[system]\nspin = 3\n";
        let err = RunConfig::parse(text).unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    #[test]
    fn unknown_section_rejected() {
        let err = RunConfig::parse("[warp]\nfactor = 9\n").unwrap_err();
        assert!(err.to_string().contains("unknown section"), "{err}");
    }

    #[test]
    fn key_outside_section_rejected() {
        let err = RunConfig::parse("a = 1\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "# cocycle run\n\n[step]\nkappa = 0.25\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.kappa, 0.25);
    }

    #[test]
    fn builds_engine_pieces() {
        let cfg = RunConfig::default();
        let freq = cfg.frequency().unwrap();
        assert_eq!(freq.dim(), 1);
        let f = cfg.perturbation().unwrap();
        assert_eq!(f.num_modes(), 2);
        let step = cfg.step_config().unwrap();
        assert_eq!(step.mode, Mode::Practical);
        assert!((step.target_log_eps + 30.0 * std::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn bad_mode_and_bad_number_are_parse_errors() {
        assert!(RunConfig::parse("[step]\nmode = frantic\n").is_err());
        assert!(RunConfig::parse("[step]\nkappa = many\n").is_err());
    }
}
