//! JSON problem specifications.

use std::path::Path;

use permbarrier::certify::{AlternationOptions, DoaProblem, MultiplierDegrees, SafeStabilizationProblem};
use permbarrier::polynomial::{PolyVectorField, Polynomial, VariableSet};
use permbarrier::sdp::SolverOptions;
use permbarrier::verify::VerifyOptions;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Doa,
    SafeStabilization,
    Check,
    Simulate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegreeSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lyapunov: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub barrier: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub containment: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptionSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cert_degree: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub controller_degree: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coeff_bound: Option<f64>,
    pub multiplier_degrees: DegreeSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alternation: Option<AlternationOptions>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyOptions>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverOptions>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// A certificate supplied for `check` and `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateSpec {
    pub h: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportSpec {
    /// `[lo, hi]` per variable.
    pub r#box: Option<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_states: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// Use the min-norm QP controller instead of the polynomial one.
    pub qp: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub mode: Mode,
    pub variables: Vec<String>,
    pub f: Vec<String>,
    /// Input matrix, one row per state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<Vec<String>>>,
    #[serde(rename = "V")]
    pub v: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub r#unsafe: Vec<String>,
    #[serde(default)]
    pub options: OptionSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<CertificateSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub export: Option<ExportSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSpec>,
}

/// Command-line overrides of spec options.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub gamma: Option<f64>,
    pub cert_degree: Option<u32>,
    pub max_iterations: Option<usize>,
    pub seed: Option<u64>,
    pub sdp_tolerance: Option<f64>,
}

/// Every option with its default filled in; recorded in outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedOptions {
    pub gamma: f64,
    pub cert_degree: u32,
    pub controller_degree: u32,
    pub coeff_bound: f64,
    pub multiplier_degrees: MultiplierDegrees,
    pub alternation: AlternationOptions,
    pub verify: VerifyOptions,
    pub solver: SolverOptions,
}

/// A validated specification with parsed polynomials.
#[derive(Debug, Clone)]
pub struct Problem {
    pub name: Option<String>,
    pub mode: Mode,
    pub vars: VariableSet,
    pub field: PolyVectorField,
    pub v: Polynomial,
    pub unsafe_sets: Vec<Polynomial>,
    pub options: ResolvedOptions,
    pub h: Option<Polynomial>,
    pub u: Option<Vec<Polynomial>>,
    pub export: Option<ExportSpec>,
    pub simulate: SimulateSpec,
    pub warnings: Vec<String>,
}

impl Problem {
    pub fn doa(&self) -> Result<DoaProblem, CliError> {
        let o = &self.options;
        let p = DoaProblem {
            field: self.field.without_input(),
            v: self.v.clone(),
            gamma: o.gamma,
            cert_degree: o.cert_degree,
            degrees: o.multiplier_degrees,
            options: o.alternation.clone(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn safe_stabilization(&self) -> Result<SafeStabilizationProblem, CliError> {
        let o = &self.options;
        let p = SafeStabilizationProblem {
            field: self.field.clone(),
            v: self.v.clone(),
            unsafe_sets: self.unsafe_sets.clone(),
            gamma: o.gamma,
            cert_degree: o.cert_degree,
            controller_degree: o.controller_degree,
            coeff_bound: o.coeff_bound,
            degrees: o.multiplier_degrees,
            options: o.alternation.clone(),
        };
        p.validate()?;
        Ok(p)
    }
}

/// 1-based line of the first occurrence of `needle` in `text`.
fn line_of(text: &str, needle: &str) -> Option<usize> {
    let quoted = format!("\"{needle}\"");
    text.find(&quoted).map(|pos| text[..pos].matches('\n').count() + 1)
}

impl ProblemSpec {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Parse {
            origin: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok((Self::from_json(&text, &path.display().to_string())?, text))
    }

    /// Use the certificate (and the variables it was written over) from a
    /// previous run instead of the one in the spec.
    pub fn with_certificate(mut self, variables: &[String], h: String, u: Option<Vec<String>>) -> Result<Self, CliError> {
        if variables != self.variables.as_slice() {
            return Err(CliError::invalid(
                "certificate.variables",
                format!("{variables:?} do not match the spec's {:?}", self.variables),
            ));
        }
        self.certificate = Some(CertificateSpec { h, u });
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// Parse every polynomial and resolve defaults. `source` (the original
    /// file text) is used to attach line numbers to polynomial errors.
    pub fn resolve(&self, overrides: &Overrides, source: Option<&str>) -> Result<Problem, CliError> {
        let vars = VariableSet::new(&self.variables).map_err(|e| CliError::invalid("variables", e.to_string()))?;
        let n = vars.dim();
        let parse = |field: String, text: &str| -> Result<Polynomial, CliError> {
            Polynomial::parse(text, &vars).map_err(|e| CliError::Polynomial {
                field,
                line: source.and_then(|s| line_of(s, text)),
                message: e.to_string(),
            })
        };
        if self.f.len() != n {
            return Err(CliError::invalid("f", format!("{} components for {n} variables", self.f.len())));
        }
        let drift = self.f.iter().enumerate().map(|(i, s)| parse(format!("f[{i}]"), s)).collect::<Result<Vec<_>, _>>()?;
        let v = parse("V".into(), &self.v)?;
        let mut warnings = Vec::new();
        let field = match (&self.g, self.mode) {
            (None, Mode::SafeStabilization) => {
                return Err(CliError::invalid("g", "safe-stabilization mode requires an input matrix"));
            }
            (Some(_), Mode::Doa) => {
                warnings.push("g is ignored in doa mode".to_string());
                PolyVectorField::autonomous(drift)?
            }
            (Some(g), _) => {
                if g.len() != n {
                    return Err(CliError::invalid("g", format!("{} rows for {n} variables", g.len())));
                }
                let rows = g
                    .iter()
                    .enumerate()
                    .map(|(i, row)| {
                        row.iter().enumerate().map(|(j, s)| parse(format!("g[{i}][{j}]"), s)).collect::<Result<Vec<_>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                PolyVectorField::control_affine(drift, rows)?
            }
            (None, _) => PolyVectorField::autonomous(drift)?,
        };
        if self.mode == Mode::Doa && !self.r#unsafe.is_empty() {
            warnings.push("unsafe sets are ignored in doa mode".to_string());
        }
        let unsafe_sets = if self.mode == Mode::Doa {
            Vec::new()
        } else {
            self.r#unsafe.iter().enumerate().map(|(i, s)| parse(format!("unsafe[{i}]"), s)).collect::<Result<Vec<_>, _>>()?
        };
        if self.mode == Mode::SafeStabilization && unsafe_sets.is_empty() {
            warnings.push("no unsafe sets given; only stabilization is certified".to_string());
        }

        let (h, u) = match &self.certificate {
            Some(c) => {
                let h = parse("certificate.h".into(), &c.h)?;
                let u = match &c.u {
                    Some(list) => Some(
                        list.iter().enumerate().map(|(j, s)| parse(format!("certificate.u[{j}]"), s)).collect::<Result<Vec<_>, _>>()?,
                    ),
                    None => None,
                };
                (Some(h), u)
            }
            None => (None, None),
        };
        if matches!(self.mode, Mode::Check | Mode::Simulate) && h.is_none() {
            return Err(CliError::invalid("certificate", "check and simulate modes need a certificate h"));
        }
        if let (Some(u), Some(_)) = (&u, field.input()) {
            if u.len() != field.control_dim() {
                return Err(CliError::invalid(
                    "certificate.u",
                    format!("{} components for {} inputs", u.len(), field.control_dim()),
                ));
            }
        }

        let options = self.resolve_options(&field, &v, h.as_ref(), overrides)?;
        Ok(Problem {
            name: self.name.clone(),
            mode: self.mode,
            vars,
            field,
            v,
            unsafe_sets,
            options,
            h,
            u,
            export: self.export.clone(),
            simulate: self.simulate.clone().unwrap_or_default(),
            warnings,
        })
    }

    fn resolve_options(
        &self,
        field: &PolyVectorField,
        v: &Polynomial,
        h: Option<&Polynomial>,
        ov: &Overrides,
    ) -> Result<ResolvedOptions, CliError> {
        let o = &self.options;
        let defaults = MultiplierDegrees::for_field(field);
        let d = &o.multiplier_degrees;
        let top = h.map_or(v.degree(), |h| h.degree().max(v.degree()));
        let mut alternation = o.alternation.clone().unwrap_or_default();
        if let Some(k) = ov.max_iterations {
            alternation.max_iterations = k;
        }
        let mut verify = o.verify.clone().unwrap_or_default();
        if let Some(seed) = ov.seed.or(o.seed) {
            verify.seed = seed;
        }
        let mut solver = o.solver.clone().unwrap_or_default();
        if let Some(tol) = ov.sdp_tolerance {
            solver.feasibility_tol = tol;
            solver.gap_tol = tol;
        }
        solver.validate().map_err(|e| CliError::invalid("options.solver", e.to_string()))?;
        let resolved = ResolvedOptions {
            gamma: ov.gamma.or(o.gamma).unwrap_or(1.0),
            cert_degree: ov.cert_degree.or(o.cert_degree).unwrap_or(top + top % 2),
            controller_degree: o.controller_degree.unwrap_or(1),
            coeff_bound: o.coeff_bound.unwrap_or(100.0),
            multiplier_degrees: MultiplierDegrees {
                lyapunov: d.lyapunov.unwrap_or(defaults.lyapunov),
                barrier: d.barrier.unwrap_or(defaults.barrier),
                containment: d.containment,
            },
            alternation,
            verify,
            solver,
        };
        if !(resolved.gamma > 0.0) {
            return Err(CliError::invalid("options.gamma", format!("must be positive, got {}", resolved.gamma)));
        }
        Ok(resolved)
    }
}

/// Starting-point specification written by `init`.
pub fn template(mode: Mode) -> ProblemSpec {
    let s = |x: &str| x.to_string();
    match mode {
        Mode::SafeStabilization => ProblemSpec {
            name: Some(s("oscillator with three circular obstacles")),
            mode,
            variables: vec![s("x1"), s("x2")],
            f: vec![s("x2"), s("-x1")],
            g: Some(vec![vec![s("0")], vec![s("1")]]),
            v: s("x1^2 + x1*x2 + x2^2"),
            r#unsafe: vec![
                s("(x1 - 3)^2 + (x2 - 1)^2 - 1"),
                s("(x1 + 3)^2 + (x2 + 4)^2 - 1"),
                s("(x1 + 4)^2 + (x2 - 5)^2 - 1"),
            ],
            options: OptionSpec { gamma: Some(1.0), cert_degree: Some(2), ..Default::default() },
            certificate: None,
            export: None,
            simulate: None,
        },
        _ => ProblemSpec {
            name: Some(s("two-state system with a cubic term")),
            mode: Mode::Doa,
            variables: vec![s("x1"), s("x2")],
            f: vec![s("x2"), s("-x1 - x2 + x1^3")],
            g: None,
            v: s("x1^2 + x1*x2 + x2^2 + x1^4 + x2^4"),
            r#unsafe: vec![],
            options: OptionSpec { gamma: Some(1.0), cert_degree: Some(4), ..Default::default() },
            certificate: None,
            export: Some(ExportSpec { r#box: Some(vec![[-3.0, 3.0], [-3.0, 3.0]]), resolution: Some(200) }),
            simulate: None,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_resolve() {
        for mode in [Mode::Doa, Mode::SafeStabilization] {
            let spec = template(mode);
            let back = ProblemSpec::from_json(&spec.to_json(), "template").unwrap();
            assert_eq!(back, spec);
            back.resolve(&Overrides::default(), None).unwrap();
        }
    }

    #[test]
    fn doa_with_input_warns() {
        let mut spec = template(Mode::Doa);
        spec.g = Some(vec![vec!["0".into()], vec!["1".into()]]);
        let p = spec.resolve(&Overrides::default(), None).unwrap();
        assert!(p.field.input().is_none());
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn safe_stabilization_requires_input() {
        let mut spec = template(Mode::SafeStabilization);
        spec.g = None;
        assert!(matches!(spec.resolve(&Overrides::default(), None), Err(CliError::Invalid { .. })));
    }

    #[test]
    fn polynomial_errors_carry_line() {
        let mut spec = template(Mode::Doa);
        spec.v = "x1^2 + y".into();
        let text = spec.to_json();
        match spec.resolve(&Overrides::default(), Some(&text)) {
            Err(CliError::Polynomial { field, line, .. }) => {
                assert_eq!(field, "V");
                assert_eq!(line, line_of(&text, "x1^2 + y"));
                assert!(line.is_some());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn json_errors_carry_line() {
        let err = ProblemSpec::from_json("{\n  \"mode\": \"doa\",\n  oops\n}", "inline").unwrap_err();
        assert!(matches!(err, CliError::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn overrides_take_precedence() {
        let spec = template(Mode::Doa);
        let ov = Overrides { gamma: Some(2.0), cert_degree: Some(6), max_iterations: Some(3), seed: Some(9), sdp_tolerance: Some(1e-7) };
        let p = spec.resolve(&ov, None).unwrap();
        assert_eq!(p.options.gamma, 2.0);
        assert_eq!(p.options.cert_degree, 6);
        assert_eq!(p.options.alternation.max_iterations, 3);
        assert_eq!(p.options.verify.seed, 9);
        assert_eq!(p.options.solver.gap_tol, 1e-7);
    }
}
