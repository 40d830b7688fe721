//! Orchestration of the verbs and the files they write.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use permbarrier::certify::{self, CertificateResult, IterationRecord, StopReason};
use permbarrier::polynomial::Polynomial;
use permbarrier::sdp::InteriorPoint;
use permbarrier::verify::{self, CheckResult, DomainBox, VerificationReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::export;
use crate::spec::{Mode, Problem, ResolvedOptions};

/// Overrides the SDP feasibility and gap tolerances.
pub const TOLERANCE_ENV: &str = "PERMBARRIER_SDP_TOL";

pub fn tolerance_from_env() -> Result<Option<f64>, CliError> {
    match std::env::var(TOLERANCE_ENV) {
        Ok(s) => s
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|t| *t > 0.0)
            .map(Some)
            .ok_or_else(|| CliError::invalid(TOLERANCE_ENV, format!("expected a positive number, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramFile {
    pub basis: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

/// Contents of `certificate.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub name: Option<String>,
    pub mode: Mode,
    pub variables: Vec<String>,
    pub h: String,
    pub u: Option<Vec<String>>,
    pub c_star: Option<f64>,
    pub sublevel_multiplier: Option<String>,
    pub l1: Option<String>,
    pub l2: Option<String>,
    pub j: Vec<String>,
    pub gram: Option<GramFile>,
    pub trace_history: Vec<f64>,
    pub iterations: Vec<IterationRecord>,
    pub stop: Option<StopReason>,
    pub trace_saturated: bool,
    pub options: ResolvedOptions,
}

impl CertificateFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Parse {
            origin: path.display().to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    fn from_result(problem: &Problem, r: &CertificateResult) -> Self {
        let vars = &problem.vars;
        let show = |p: &Polynomial| p.display(vars).to_string();
        let gram = &r.gram;
        let k = gram.dim();
        CertificateFile {
            name: problem.name.clone(),
            mode: problem.mode,
            variables: vars.names().to_vec(),
            h: show(&r.h),
            u: r.u.as_ref().map(|u| u.iter().map(show).collect()),
            c_star: Some(r.c_star),
            sublevel_multiplier: Some(show(&r.sublevel_multiplier)),
            l1: r.l1.as_ref().map(show),
            l2: r.l2.as_ref().map(show),
            j: r.j.iter().map(show).collect(),
            gram: Some(GramFile {
                basis: gram
                    .basis()
                    .entries()
                    .iter()
                    .map(|m| show(&Polynomial::monomial(m.clone(), 1.0)))
                    .collect(),
                matrix: (0..k).map(|i| (0..k).map(|j| gram.get(i, j)).collect()).collect(),
            }),
            trace_history: r.trace_history.clone(),
            iterations: r.iterations.clone(),
            stop: Some(r.stop),
            trace_saturated: r.trace_saturated,
            options: problem.options.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub passed: bool,
    #[serde(flatten)]
    pub report: VerificationReport,
}

/// Result of a verb: whether verification passed, plus human-readable lines.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub verified: bool,
    pub messages: Vec<String>,
}

impl Problem {
    fn solver(&self) -> InteriorPoint {
        InteriorPoint::new(self.options.solver.clone())
    }
}

/// Run synthesis (doa or safe-stabilization) and verification.
pub fn synthesize(problem: &Problem) -> Result<(CertificateResult, CertificateFile), CliError> {
    let solver = problem.solver();
    let verify_opts = Some(&problem.options.verify);
    let result = match problem.mode {
        Mode::Doa => certify::expand_doa(&problem.doa()?, &solver, verify_opts)?,
        Mode::SafeStabilization => certify::synthesize_safe_region(&problem.safe_stabilization()?, &solver, verify_opts)?,
        other => return Err(CliError::invalid("mode", format!("{other:?} does not synthesize"))),
    };
    let file = CertificateFile::from_result(problem, &result);
    Ok((result, file))
}

/// Verify the spec's certificate without synthesis.
pub fn check(problem: &Problem) -> Result<VerificationReport, CliError> {
    let h = problem.h.as_ref().ok_or_else(|| CliError::invalid("certificate.h", "missing"))?;
    let controlled = problem.field.input().is_some();
    if controlled && problem.u.is_none() {
        return Err(CliError::invalid("certificate.u", "a controlled system needs a controller to check"));
    }
    let cert = verify::Certificate {
        field: &problem.field,
        v: &problem.v,
        h,
        controller: problem.u.as_deref().filter(|_| controlled),
        unsafe_sets: &problem.unsafe_sets,
        gamma: problem.options.gamma,
    };
    let opts = &problem.options.verify;
    // an unbounded region (or one missing the origin) cannot be sampled; that is a failed check, not an error
    let domain = match verify::bounding_box(h) {
        Ok(d) => d,
        Err(_) => {
            let failed = CheckResult {
                name: "bounded_region".into(),
                samples: 0,
                worst_margin: -1.0,
                threshold: 0.0,
                passed: false,
            };
            return Ok(VerificationReport { checks: vec![failed], ..Default::default() });
        }
    };
    let mut report = verify::verify_certificate(&cert, opts)?;
    report.region_volume = Some(verify::estimate_volume(h, &domain, opts.volume_samples, opts.seed)?);
    Ok(report)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

/// Write `region.csv` for `h` (and `c* - V` when known) into `out`.
pub fn export_region(problem: &Problem, h: &Polynomial, c_star: Option<f64>, path: &Path) -> Result<usize, CliError> {
    let n = problem.vars.dim();
    if n > 3 {
        return Err(CliError::Dimension(n));
    }
    let spec = problem.export.as_ref();
    let domain = match spec.and_then(|e| e.r#box.as_ref()) {
        Some(b) => DomainBox::new(b.iter().map(|r| r[0]).collect(), b.iter().map(|r| r[1]).collect())
            .map_err(|e| CliError::invalid("export.box", e.to_string()))?,
        None => {
            let sub = c_star.map(|c| Polynomial::constant(n, c) - &problem.v);
            let mut regions = vec![h];
            regions.extend(sub.as_ref());
            export::default_box(&regions)?
        }
    };
    let resolution = spec.and_then(|e| e.resolution).unwrap_or_else(|| export::default_resolution(n));
    let mut w = create(path)?;
    let rows = export::write_region(&mut w, &problem.vars, h, &problem.v, &problem.unsafe_sets, &domain, resolution)?;
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(rows)
}

fn report_lines(report: &VerificationReport) -> Vec<String> {
    let mut lines: Vec<String> = report
        .checks
        .iter()
        .map(|c| {
            format!(
                "{:<20} {} (worst {:.3e}, threshold {:.1e}, {} samples)",
                c.name,
                if c.passed { "ok" } else { "FAILED" },
                c.worst_margin,
                c.threshold,
                c.samples
            )
        })
        .collect();
    if let Some(v) = &report.region_volume {
        lines.push(format!("region volume        {:.4} ± {:.4}", v.volume, v.standard_error));
    }
    if let Some(v) = &report.sublevel_volume {
        lines.push(format!("sublevel volume      {:.4} ± {:.4}", v.volume, v.standard_error));
    }
    lines
}

fn write_region_or_skip(problem: &Problem, h: &Polynomial, c_star: Option<f64>, out: &Path, messages: &mut Vec<String>) -> Result<(), CliError> {
    match export_region(problem, h, c_star, &out.join("region.csv")) {
        Ok(rows) => {
            messages.push(format!("wrote region.csv ({rows} rows)"));
            Ok(())
        }
        Err(CliError::Dimension(n)) => {
            messages.push(format!("warning: region.csv skipped ({n} variables; export needs at most 3)"));
            Ok(())
        }
        Err(CliError::Verify(e)) => {
            messages.push(format!("warning: region.csv skipped ({e}); set export.box"));
            Ok(())
        }
        Err(e) => Err(e),
    }
}

/// Execute the spec's mode and write its outputs into `out`.
pub fn run(problem: &Problem, out: &Path) -> Result<Outcome, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut messages: Vec<String> = problem.warnings.iter().map(|w| format!("warning: {w}")).collect();
    match problem.mode {
        Mode::Doa | Mode::SafeStabilization => {
            let (result, file) = synthesize(problem)?;
            let report = result.report.clone().unwrap_or_default();
            write_json(&out.join("certificate.json"), &file)?;
            write_json(&out.join("report.json"), &ReportFile { passed: report.passed(), report: report.clone() })?;
            messages.push(format!("c* = {}", result.c_star));
            messages.push(format!(
                "{} iterations, stop: {:?}{}",
                result.iterations.len(),
                result.stop,
                if result.trace_saturated { " (Gram bound active)" } else { "" }
            ));
            for it in result.iterations.iter().filter(|it| !it.accepted) {
                messages.push(format!(
                    "iteration {} rejected: margin {:?}, certificate {:?}",
                    it.iteration, it.step2_status, it.step3_status
                ));
            }
            messages.push(format!("h = {}", file.h));
            if let Some(u) = &file.u {
                messages.push(format!("u = [{}]", u.join(", ")));
            }
            messages.extend(report_lines(&report));
            write_region_or_skip(problem, &result.h, Some(result.c_star), out, &mut messages)?;
            Ok(Outcome { verified: report.passed(), messages })
        }
        Mode::Check => {
            let report = check(problem)?;
            write_json(&out.join("report.json"), &ReportFile { passed: report.passed(), report: report.clone() })?;
            messages.extend(report_lines(&report));
            let h = problem.h.as_ref().expect("checked above");
            write_region_or_skip(problem, h, None, out, &mut messages)?;
            Ok(Outcome { verified: report.passed(), messages })
        }
        Mode::Simulate => {
            let (ok, rows) = simulate(problem, &out.join("trajectories.csv"))?;
            messages.push(format!("wrote trajectories.csv ({rows} rows)"));
            Ok(Outcome { verified: ok, messages })
        }
    }
}

/// Simulate from the spec's initial states (or samples of `{h >= 0}`) and
/// write `trajectories.csv`. Returns whether every trajectory stayed in the
/// region, avoided the unsafe sets and converged, plus the row count.
pub fn simulate(problem: &Problem, path: &Path) -> Result<(bool, usize), CliError> {
    let h = problem.h.as_ref().ok_or_else(|| CliError::invalid("certificate.h", "missing"))?;
    let opts = &problem.options.verify;
    let sim = &problem.simulate;
    let n = problem.vars.dim();
    let starts = match &sim.initial_states {
        Some(s) => {
            if let Some(bad) = s.iter().find(|x| x.len() != n) {
                return Err(CliError::invalid("simulate.initial_states", format!("state {bad:?} is not {n}-dimensional")));
            }
            s.clone()
        }
        None => {
            let domain = verify::bounding_box(h)?;
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            verify::uniform_region_samples(h, &domain, sim.count.unwrap_or(10), &mut rng)
        }
    };
    let controlled = problem.field.input().is_some();
    let poly_u = problem.u.as_ref().filter(|_| controlled && !sim.qp);
    if controlled && poly_u.is_none() && !sim.qp {
        return Err(CliError::invalid("certificate.u", "a controlled system needs u, or simulate.qp = true"));
    }
    let gamma = problem.options.gamma;
    let eval_u = |x: &[f64]| -> Vec<f64> {
        match poly_u {
            Some(u) => u.iter().map(|p| p.eval(x)).collect(),
            None => verify::qp_controller(x, &problem.v, h, &problem.field, gamma)
                .unwrap_or_else(|_| vec![0.0; problem.field.control_dim()]),
        }
    };
    let controller: Option<&dyn Fn(&[f64]) -> Vec<f64>> = if controlled { Some(&eval_u) } else { None };
    let dt = sim.dt.unwrap_or(opts.dt);
    let horizon = match sim.horizon.or(opts.horizon) {
        Some(t) => t,
        None => {
            let closed = match poly_u {
                Some(u) => problem.field.closed_loop(u)?,
                None => problem.field.without_input(),
            };
            verify::default_horizon(&closed)
        }
    };

    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["trajectory".to_string(), "t".to_string()];
    header.extend(problem.vars.names().iter().cloned());
    header.push("h".into());
    header.extend((1..=problem.unsafe_sets.len()).map(|i| format!("q{i}")));
    if controlled {
        header.extend((1..=problem.field.control_dim()).map(|j| format!("u{j}")));
    }
    w.write_record(&header)?;
    let mut ok = true;
    let mut rows = 0;
    for (k, x0) in starts.iter().enumerate() {
        let traj = verify::simulate(&problem.field, controller, x0, dt, horizon)?;
        for (i, x) in traj.states.iter().enumerate() {
            let hx = h.eval(x);
            ok &= hx >= opts.trajectory_threshold && hx.is_finite();
            let mut rec = vec![k.to_string(), traj.times[i].to_string()];
            rec.extend(x.iter().map(|v| v.to_string()));
            rec.push(hx.to_string());
            for q in &problem.unsafe_sets {
                let qx = q.eval(x);
                ok &= qx >= opts.trajectory_threshold;
                rec.push(qx.to_string());
            }
            if controlled {
                rec.extend(eval_u(x).iter().map(|v| v.to_string()));
            }
            w.write_record(&rec)?;
            rows += 1;
        }
        let last = traj.states.last().expect("nonempty trajectory");
        ok &= last.iter().map(|v| v * v).sum::<f64>().sqrt() < opts.final_norm;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok((ok, rows))
}

