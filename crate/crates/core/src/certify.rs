//! Iterative synthesis of barrier certificates.
//!
//! Both variants share the same loop: a sublevel search on the Lyapunov
//! candidate seeds `h = c* - V`, then margin maximization over the
//! multipliers (and controller) alternates with trace maximization over `h`
//! until the trace stops increasing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polynomial::{Monomial, PolyError, PolyVectorField, Polynomial};
use crate::sdp::{SdpSolver, SolveStatus};
use crate::smr::{GramForm, MonomialBasis, SmrError};
use crate::sos::{Cmp, Expr, Linear, SosError, SosProgram};
use crate::verify::{self, VerificationReport, VerifyError, VerifyOptions};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CertifyError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("no feasible sublevel found (last status {0:?})")]
    NoFeasibleLevel(SolveStatus),
    #[error("iteration {iteration}: margin search failed ({status:?})")]
    Step2 { iteration: usize, status: SolveStatus },
    #[error("iteration {iteration}: certificate search failed ({status:?})")]
    Step3 { iteration: usize, status: SolveStatus },
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Smr(#[from] SmrError),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

/// Degrees of the SOS multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiplierDegrees {
    /// `L` (sublevel search) and `L1` (Lyapunov decrease on the region).
    pub lyapunov: u32,
    /// `L2` in the barrier condition.
    pub barrier: u32,
    /// `J_i` for containment; `None` uses `cert_degree - deg q_i + 2`.
    pub containment: Option<u32>,
}

impl MultiplierDegrees {
    /// Smallest even degree `>= max(2, deg f - 1)` for `L`, `L1`, `L2`.
    pub fn for_field(field: &PolyVectorField) -> Self {
        let d = field.degree().saturating_sub(1).max(2);
        let d = d + d % 2;
        Self { lyapunov: d, barrier: d, containment: None }
    }

    fn containment_for(&self, cert_degree: u32, q: &Polynomial) -> u32 {
        self.containment.unwrap_or_else(|| {
            let d = (cert_degree + 2).saturating_sub(q.degree());
            d - d % 2
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlternationOptions {
    pub max_iterations: usize,
    /// Stop once the relative trace improvement falls below this.
    pub trace_tolerance: f64,
    /// Safeguard `Q ⪯ gram_bound · I` on the certificate's Gram matrix.
    pub gram_bound: f64,
    pub sublevel_tolerance: f64,
    pub sublevel_cap: f64,
}

impl Default for AlternationOptions {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            trace_tolerance: 1e-6,
            gram_bound: 1e4,
            sublevel_tolerance: 1e-4,
            sublevel_cap: 1024.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DoaProblem {
    pub field: PolyVectorField,
    pub v: Polynomial,
    pub gamma: f64,
    pub cert_degree: u32,
    pub degrees: MultiplierDegrees,
    pub options: AlternationOptions,
}

impl DoaProblem {
    pub fn new(field: PolyVectorField, v: Polynomial) -> Result<Self, CertifyError> {
        let degrees = MultiplierDegrees::for_field(&field);
        let cert_degree = v.degree() + v.degree() % 2;
        let p = Self { field, v, gamma: 1.0, cert_degree, degrees, options: AlternationOptions::default() };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CertifyError> {
        validate_common(&self.field, &self.v, self.gamma, self.cert_degree)
    }
}

#[derive(Debug, Clone)]
pub struct SafeStabilizationProblem {
    pub field: PolyVectorField,
    pub v: Polynomial,
    pub unsafe_sets: Vec<Polynomial>,
    pub gamma: f64,
    pub cert_degree: u32,
    pub controller_degree: u32,
    pub coeff_bound: f64,
    pub degrees: MultiplierDegrees,
    pub options: AlternationOptions,
}

impl SafeStabilizationProblem {
    pub fn new(field: PolyVectorField, v: Polynomial, unsafe_sets: Vec<Polynomial>) -> Result<Self, CertifyError> {
        let degrees = MultiplierDegrees::for_field(&field);
        let cert_degree = v.degree() + v.degree() % 2;
        let p = Self {
            field,
            v,
            unsafe_sets,
            gamma: 1.0,
            cert_degree,
            controller_degree: 1,
            coeff_bound: 100.0,
            degrees,
            options: AlternationOptions::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CertifyError> {
        validate_common(&self.field, &self.v, self.gamma, self.cert_degree)?;
        if self.field.input().is_none() {
            return Err(CertifyError::InvalidProblem("safe stabilization needs an input matrix g".into()));
        }
        let n = self.field.dim();
        if let Some(q) = self.unsafe_sets.iter().find(|q| q.nvars() != n) {
            return Err(CertifyError::InvalidProblem(format!("unsafe set has {} variables, expected {n}", q.nvars())));
        }
        if self.controller_degree == 0 {
            return Err(CertifyError::InvalidProblem("controller degree must be at least 1".into()));
        }
        if !(self.coeff_bound >= 0.0) {
            return Err(CertifyError::InvalidProblem("coefficient bound must be nonnegative".into()));
        }
        Ok(())
    }
}

fn validate_common(field: &PolyVectorField, v: &Polynomial, gamma: f64, cert_degree: u32) -> Result<(), CertifyError> {
    let n = field.dim();
    if v.nvars() != n {
        return Err(CertifyError::InvalidProblem(format!("V has {} variables, f has {n}", v.nvars())));
    }
    if !(gamma > 0.0) {
        return Err(CertifyError::InvalidProblem(format!("gamma must be positive, got {gamma}")));
    }
    if cert_degree < 2 || cert_degree % 2 != 0 {
        return Err(CertifyError::InvalidProblem(format!("certificate degree must be even and >= 2, got {cert_degree}")));
    }
    if v.degree() > cert_degree {
        return Err(CertifyError::InvalidProblem(format!(
            "certificate degree {cert_degree} is below deg V = {}",
            v.degree()
        )));
    }
    if v.constant_term().abs() > 1e-12 {
        return Err(CertifyError::InvalidProblem("V(0) must be 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for radius in [1e-3, 1e-2, 1e-1] {
        for _ in 0..200 {
            let mut x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let nr = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            x.iter_mut().for_each(|a| *a *= radius / nr);
            if v.eval(&x) <= 0.0 {
                return Err(CertifyError::InvalidProblem(format!("V is not positive near the origin at {x:?}")));
            }
        }
    }
    Ok(())
}

fn monomials(n: usize, lo: u32, hi: u32) -> Vec<Monomial> {
    MonomialBasis::with_degrees(n, lo, hi).entries().to_vec()
}

/// Multiplier vanishing at the origin: Gram basis from degree 1.
fn vanishing_basis(n: usize, degree: u32) -> MonomialBasis {
    MonomialBasis::with_degrees(n, 1, (degree / 2).max(1))
}

fn full_basis(n: usize, degree: u32) -> MonomialBasis {
    MonomialBasis::standard(n, degree / 2)
}

/// Rows of `dV/dx g`: the factor multiplying each input component.
fn input_factors(p: &Polynomial, field: &PolyVectorField) -> Vec<Polynomial> {
    let grad = p.gradient();
    let g = field.input().expect("controlled field");
    (0..field.control_dim())
        .map(|j| grad.iter().zip(g).fold(Polynomial::zero(p.nvars()), |acc, (dp, row)| acc + dp * &row[j]))
        .collect()
}

fn usable(status: SolveStatus) -> bool {
    status.is_usable()
}

#[derive(Debug, Clone)]
pub struct SublevelResult {
    pub c_star: f64,
    pub l: Polynomial,
    pub u: Option<Vec<Polynomial>>,
    pub j: Vec<Polynomial>,
    pub solves: usize,
}

struct SublevelSpec<'a> {
    field: &'a PolyVectorField,
    v: &'a Polynomial,
    l_degree: u32,
    unsafe_sets: &'a [Polynomial],
    j_degrees: Vec<u32>,
    controller: Option<(u32, f64)>,
}

fn sublevel_at(spec: &SublevelSpec, c: f64, solver: &dyn SdpSolver) -> Result<(SolveStatus, Option<SublevelResult>), CertifyError> {
    let n = spec.field.dim();
    let mut prog = SosProgram::new(n);
    let vdot = spec.v.lie_derivative(spec.field)?;
    let l = prog.sos_poly("L", vanishing_basis(n, spec.l_degree));
    let c_minus_v = Polynomial::constant(n, c) - spec.v;
    let mut decrease = Expr::known(-&vdot).plus_poly(l, -&c_minus_v);
    let mut us = Vec::new();
    if let Some((deg, bound)) = spec.controller {
        for (j, factor) in input_factors(spec.v, spec.field).into_iter().enumerate() {
            let u = prog.free_poly(&format!("u{}", j + 1), monomials(n, 1, deg));
            prog.bound_coefficients(u, bound)?;
            decrease = decrease.plus_poly(u, -&factor);
            us.push(u);
        }
    }
    prog.require_sos("sublevel decrease", decrease);
    let mut js = Vec::new();
    for (i, (q, &dj)) in spec.unsafe_sets.iter().zip(&spec.j_degrees).enumerate() {
        let j = prog.sos_poly(&format!("J{}", i + 1), full_basis(n, dj));
        prog.require_sos("sublevel containment", Expr::known(-&c_minus_v).plus_poly(j, q.clone()));
        js.push(j);
    }
    let (status, sol) = prog.solve(solver)?;
    Ok((
        status,
        sol.filter(|_| usable(status)).map(|s| SublevelResult {
            c_star: c,
            l: s.poly(l).clone(),
            u: spec.controller.map(|_| us.iter().map(|&u| s.poly(u).clone()).collect()),
            j: js.iter().map(|&j| s.poly(j).clone()).collect(),
            solves: 0,
        }),
    ))
}

fn bisect_sublevel(spec: &SublevelSpec, opts: &AlternationOptions, solver: &dyn SdpSolver) -> Result<SublevelResult, CertifyError> {
    let mut solves = 0;
    let mut last_status = SolveStatus::Infeasible;
    let mut probe = |c: f64| -> Result<Option<SublevelResult>, CertifyError> {
        solves += 1;
        let (st, r) = sublevel_at(spec, c, solver)?;
        last_status = st;
        Ok(r)
    };
    let mut best: Option<SublevelResult> = None;
    let (mut lo, mut hi) = (0.0, None);
    let mut c = 1.0;
    while c <= opts.sublevel_cap {
        match probe(c)? {
            Some(r) => {
                lo = c;
                best = Some(r);
                c *= 2.0;
            }
            None => {
                hi = Some(c);
                break;
            }
        }
    }
    if let Some(mut hi) = hi {
        while hi - lo > opts.sublevel_tolerance {
            let mid = 0.5 * (lo + hi);
            match probe(mid)? {
                Some(r) => {
                    lo = mid;
                    best = Some(r);
                }
                None => hi = mid,
            }
        }
    }
    let mut r = best.ok_or(CertifyError::NoFeasibleLevel(last_status))?;
    r.solves = solves;
    Ok(r)
}

/// Largest `c` with `-dV/dx f - L (c - V)` SOS for some SOS `L`.
pub fn max_sublevel(
    field: &PolyVectorField,
    v: &Polynomial,
    l_degree: u32,
    opts: &AlternationOptions,
    solver: &dyn SdpSolver,
) -> Result<SublevelResult, CertifyError> {
    let spec = SublevelSpec { field: &field.without_input(), v, l_degree, unsafe_sets: &[], j_degrees: vec![], controller: None };
    bisect_sublevel(&spec, opts, solver)
}

/// Controlled sublevel search with containment of `{V <= c}` in the safe set.
pub fn max_sublevel_controlled(p: &SafeStabilizationProblem, solver: &dyn SdpSolver) -> Result<SublevelResult, CertifyError> {
    p.validate()?;
    let spec = SublevelSpec {
        field: &p.field,
        v: &p.v,
        l_degree: p.degrees.lyapunov,
        unsafe_sets: &p.unsafe_sets,
        j_degrees: p.unsafe_sets.iter().map(|q| p.degrees.containment_for(p.cert_degree, q)).collect(),
        controller: Some((p.controller_degree, p.coeff_bound)),
    };
    bisect_sublevel(&spec, &p.options, solver)
}

#[derive(Debug, Clone)]
pub struct MarginResult {
    pub l1: Polynomial,
    pub l2: Polynomial,
    pub u: Option<Vec<Polynomial>>,
    pub epsilon: f64,
    pub status: SolveStatus,
}

fn margin_search(
    h: &Polynomial,
    field: &PolyVectorField,
    v: &Polynomial,
    gamma: f64,
    degrees: &MultiplierDegrees,
    controller: Option<(u32, f64)>,
    solver: &dyn SdpSolver,
) -> Result<(SolveStatus, Option<MarginResult>), CertifyError> {
    let n = field.dim();
    let drift = field.without_input();
    let mut prog = SosProgram::new(n);
    let l1 = prog.sos_poly("L1", vanishing_basis(n, degrees.lyapunov));
    let l2 = prog.sos_poly("L2", full_basis(n, degrees.barrier));
    let eps = prog.scalar("epsilon", true);
    let vdot = v.lie_derivative(&drift)?;
    let hdot = h.lie_derivative(&drift)?;
    let mut decrease = Expr::known(-&vdot).plus_poly(l1, -h);
    let mut barrier = Expr::known(&hdot + &h.scale(gamma))
        .plus_poly(l2, -h)
        .plus_scalar(eps, Polynomial::constant(n, -1.0));
    let mut us = Vec::new();
    if let Some((deg, bound)) = controller {
        let fv = input_factors(v, field);
        let fh = input_factors(h, field);
        for j in 0..field.control_dim() {
            let u = prog.free_poly(&format!("u{}", j + 1), monomials(n, 1, deg));
            prog.bound_coefficients(u, bound)?;
            decrease = decrease.plus_poly(u, -&fv[j]);
            barrier = barrier.plus_poly(u, fh[j].clone());
            us.push(u);
        }
    }
    prog.require_sos("lyapunov decrease", decrease);
    prog.require_sos("barrier", barrier);
    prog.maximize(Linear::new().scalar(eps, 1.0));
    let (status, sol) = prog.solve(solver)?;
    Ok((
        status,
        sol.filter(|_| usable(status)).map(|s| MarginResult {
            l1: s.poly(l1).clone(),
            l2: s.poly(l2).clone(),
            u: controller.map(|_| us.iter().map(|&u| s.poly(u).clone()).collect()),
            epsilon: s.scalar(eps),
            status,
        }),
    ))
}

/// Fix `h`; find `L1, L2` maximizing the barrier margin `epsilon`.
pub fn alg1_step2(
    h: &Polynomial,
    field: &PolyVectorField,
    v: &Polynomial,
    gamma: f64,
    degrees: &MultiplierDegrees,
    solver: &dyn SdpSolver,
) -> Result<MarginResult, CertifyError> {
    match margin_search(h, &field.without_input(), v, gamma, degrees, None, solver)? {
        (_, Some(r)) => Ok(r),
        (status, None) => Err(CertifyError::Step2 { iteration: 0, status }),
    }
}

/// Fix `h`; find `u, L1, L2` maximizing the margin with `|coeff(u)| <= bound`.
pub fn alg2_step2(
    h: &Polynomial,
    p: &SafeStabilizationProblem,
    solver: &dyn SdpSolver,
) -> Result<MarginResult, CertifyError> {
    let ctrl = Some((p.controller_degree, p.coeff_bound));
    match margin_search(h, &p.field, &p.v, p.gamma, &p.degrees, ctrl, solver)? {
        (_, Some(r)) => Ok(r),
        (status, None) => Err(CertifyError::Step2 { iteration: 0, status }),
    }
}

#[derive(Debug, Clone)]
pub struct TraceResult {
    pub h: Polynomial,
    pub gram: GramForm,
    pub trace: f64,
    pub j: Vec<Polynomial>,
    /// The Gram safeguard is (nearly) active.
    pub saturated: bool,
    pub status: SolveStatus,
}

pub struct TraceSpec<'a> {
    pub field: &'a PolyVectorField,
    pub v: &'a Polynomial,
    pub gamma: f64,
    pub cert_degree: u32,
    pub unsafe_sets: &'a [Polynomial],
    pub j_degrees: Vec<u32>,
    /// Value fixed for `h(0)`.
    pub h0: f64,
    pub gram_bound: f64,
}

/// Solves without the Gram safeguard first (it is inactive on bounded
/// instances and its scale hurts conditioning); falls back to the bounded
/// program when the trace is unbounded or the solve breaks down.
fn trace_search(
    spec: &TraceSpec,
    l1: &Polynomial,
    l2: &Polynomial,
    solver: &dyn SdpSolver,
) -> Result<(SolveStatus, Option<TraceResult>), CertifyError> {
    let (status, r) = trace_program(spec, l1, l2, false, solver)?;
    match status {
        SolveStatus::Optimal | SolveStatus::NearOptimal | SolveStatus::Infeasible => Ok((status, r)),
        _ => trace_program(spec, l1, l2, true, solver),
    }
}

fn trace_program(
    spec: &TraceSpec,
    l1: &Polynomial,
    l2: &Polynomial,
    bounded: bool,
    solver: &dyn SdpSolver,
) -> Result<(SolveStatus, Option<TraceResult>), CertifyError> {
    let n = spec.field.dim();
    let mut prog = SosProgram::new(n);
    let h = prog.free_poly("h", monomials(n, 0, spec.cert_degree));
    let vdot = spec.v.lie_derivative(spec.field)?;
    prog.require_sos("lyapunov decrease", Expr::known(-&vdot).plus_poly(h, -l1));
    prog.require_sos(
        "barrier",
        Expr::new(n)
            .plus_lie(h, spec.field.drift().to_vec())
            .plus_poly(h, Polynomial::constant(n, spec.gamma) - l2),
    );
    let mut js = Vec::new();
    for (i, (q, &dj)) in spec.unsafe_sets.iter().zip(&spec.j_degrees).enumerate() {
        let j = prog.sos_poly(&format!("J{}", i + 1), full_basis(n, dj));
        prog.require_sos(
            "containment",
            Expr::new(n).plus_poly(h, Polynomial::constant(n, -1.0)).plus_poly(j, q.clone()),
        );
        js.push(j);
    }
    prog.require_linear("normalization", Linear::new().coefficient(h, Monomial::one(n), 1.0), Cmp::Eq, spec.h0);
    let basis = MonomialBasis::standard(n, spec.cert_degree / 2);
    if bounded {
        prog.bound_gram(h, basis.clone(), spec.gram_bound)?;
    }
    let trace = prog.canonical_trace(h, &basis);
    prog.maximize(trace);
    let (status, sol) = prog.solve(solver)?;
    let Some(s) = sol.filter(|_| usable(status)) else {
        return Ok((status, None));
    };
    let hp = s.poly(h).clone();
    let gram = GramForm::canonical(&hp, &basis)?;
    let saturated = bounded && gram.eigenvalues().last().is_some_and(|&l| l >= (1.0 - 1e-6) * spec.gram_bound);
    Ok((
        status,
        Some(TraceResult {
            trace: gram.trace(),
            h: hp,
            gram,
            j: js.iter().map(|&j| s.poly(j).clone()).collect(),
            saturated,
            status,
        }),
    ))
}

/// Canonical-Gram trace of a certificate.
pub fn certificate_trace(h: &Polynomial, cert_degree: u32) -> Result<f64, CertifyError> {
    let basis = MonomialBasis::standard(h.nvars(), cert_degree / 2);
    Ok(GramForm::canonical(h, &basis)?.trace())
}

/// Fix `L1, L2`; find `h` maximizing the trace of its Gram matrix.
/// Rejects the result when the trace falls below `prev_trace` by more than
/// the tolerance.
pub fn alg1_step3(
    l1: &Polynomial,
    l2: &Polynomial,
    problem: &DoaProblem,
    h0: f64,
    prev_trace: f64,
    solver: &dyn SdpSolver,
) -> Result<TraceResult, CertifyError> {
    let field = problem.field.without_input();
    let spec = TraceSpec {
        field: &field,
        v: &problem.v,
        gamma: problem.gamma,
        cert_degree: problem.cert_degree,
        unsafe_sets: &[],
        j_degrees: vec![],
        h0,
        gram_bound: problem.options.gram_bound,
    };
    finish_step3(trace_search(&spec, l1, l2, solver)?, prev_trace, problem.options.trace_tolerance)
}

/// Fix `u, L1, L2`; find `h` and containment multipliers `J_i`.
pub fn alg2_step3(
    u: &[Polynomial],
    l1: &Polynomial,
    l2: &Polynomial,
    problem: &SafeStabilizationProblem,
    h0: f64,
    prev_trace: f64,
    solver: &dyn SdpSolver,
) -> Result<TraceResult, CertifyError> {
    let field = problem.field.closed_loop(u)?;
    let spec = TraceSpec {
        field: &field,
        v: &problem.v,
        gamma: problem.gamma,
        cert_degree: problem.cert_degree,
        unsafe_sets: &problem.unsafe_sets,
        j_degrees: problem.unsafe_sets.iter().map(|q| problem.degrees.containment_for(problem.cert_degree, q)).collect(),
        h0,
        gram_bound: problem.options.gram_bound,
    };
    finish_step3(trace_search(&spec, l1, l2, solver)?, prev_trace, problem.options.trace_tolerance)
}

fn finish_step3(
    (status, r): (SolveStatus, Option<TraceResult>),
    prev_trace: f64,
    tol: f64,
) -> Result<TraceResult, CertifyError> {
    match r {
        Some(r) if r.trace >= prev_trace - tol * (1.0 + prev_trace.abs()) => Ok(r),
        Some(r) => Err(CertifyError::Step3 { iteration: 0, status: r.status }),
        None => Err(CertifyError::Step3 { iteration: 0, status }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// Trace improvement fell below the tolerance.
    Converged,
    MaxIterations,
    /// A later iteration failed; the last accepted certificate is kept.
    StepFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epsilon: Option<f64>,
    pub step2_status: SolveStatus,
    pub step3_status: Option<SolveStatus>,
    pub trace: Option<f64>,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct CertificateResult {
    pub h: Polynomial,
    pub gram: GramForm,
    pub c_star: f64,
    pub sublevel_multiplier: Polynomial,
    pub u: Option<Vec<Polynomial>>,
    pub l1: Option<Polynomial>,
    pub l2: Option<Polynomial>,
    pub j: Vec<Polynomial>,
    pub trace_history: Vec<f64>,
    pub iterations: Vec<IterationRecord>,
    pub stop: StopReason,
    pub trace_saturated: bool,
    pub report: Option<VerificationReport>,
}

impl CertificateResult {
    /// The Step-1 region `{c* - V >= 0}` as a polynomial.
    pub fn sublevel_certificate(&self, v: &Polynomial) -> Polynomial {
        Polynomial::constant(v.nvars(), self.c_star) - v
    }
}

struct Loop<'a> {
    v: &'a Polynomial,
    cert_degree: u32,
    options: &'a AlternationOptions,
}

impl Loop<'_> {
    fn run(
        &self,
        sub: SublevelResult,
        mut step2: impl FnMut(&Polynomial) -> Result<(SolveStatus, Option<MarginResult>), CertifyError>,
        mut step3: impl FnMut(&MarginResult) -> Result<(SolveStatus, Option<TraceResult>), CertifyError>,
    ) -> Result<CertificateResult, CertifyError> {
        let n = self.v.nvars();
        let mut h = Polynomial::constant(n, sub.c_star) - self.v;
        let basis = MonomialBasis::standard(n, self.cert_degree / 2);
        let mut gram = GramForm::canonical(&h, &basis)?;
        let mut prev = gram.trace();
        let mut result = CertificateResult {
            h: h.clone(),
            gram: gram.clone(),
            c_star: sub.c_star,
            sublevel_multiplier: sub.l.clone(),
            u: sub.u.clone(),
            l1: None,
            l2: None,
            j: sub.j.clone(),
            trace_history: vec![prev],
            iterations: Vec::new(),
            stop: StopReason::MaxIterations,
            trace_saturated: false,
            report: None,
        };
        let tol = self.options.trace_tolerance;
        for it in 0..self.options.max_iterations {
            let (st2, margin) = step2(&h)?;
            let Some(margin) = margin else {
                result.iterations.push(IterationRecord {
                    iteration: it,
                    epsilon: None,
                    step2_status: st2,
                    step3_status: None,
                    trace: None,
                    accepted: false,
                });
                if it == 0 {
                    return Err(CertifyError::Step2 { iteration: it, status: st2 });
                }
                result.stop = StopReason::StepFailed;
                break;
            };
            let (st3, found) = step3(&margin)?;
            let mut record = IterationRecord {
                iteration: it,
                epsilon: Some(margin.epsilon),
                step2_status: st2,
                step3_status: Some(st3),
                trace: found.as_ref().map(|r| r.trace),
                accepted: false,
            };
            let Some(found) = found.filter(|r| r.trace >= prev - tol * (1.0 + prev.abs())) else {
                result.iterations.push(record);
                if it == 0 {
                    return Err(CertifyError::Step3 { iteration: it, status: st3 });
                }
                result.stop = StopReason::StepFailed;
                break;
            };
            record.accepted = true;
            result.iterations.push(record);
            let improvement = found.trace - prev;
            h = found.h.clone();
            gram = found.gram.clone();
            prev = found.trace;
            result.h = h.clone();
            result.gram = gram.clone();
            result.trace_history.push(found.trace);
            result.trace_saturated = found.saturated;
            result.l1 = Some(margin.l1.clone());
            result.l2 = Some(margin.l2.clone());
            if margin.u.is_some() {
                result.u = margin.u.clone();
                result.j = found.j.clone();
            }
            if improvement <= tol * prev.abs().max(1.0) {
                result.stop = StopReason::Converged;
                break;
            }
        }
        Ok(result)
    }
}

fn verified(
    cert: &verify::Certificate,
    result: &CertificateResult,
    opts: &VerifyOptions,
) -> Result<VerificationReport, CertifyError> {
    let mut report = verify::verify_certificate(cert, opts)?;
    let sublevel = result.sublevel_certificate(cert.v);
    let (region, sub) = verify::compare_volumes(cert.h, &sublevel, opts.volume_samples, opts.seed)?;
    report.region_volume = Some(region);
    report.sublevel_volume = Some(sub);
    Ok(report)
}

/// Enlarge the estimated domain of attraction of an autonomous system.
pub fn expand_doa(
    problem: &DoaProblem,
    solver: &dyn SdpSolver,
    verify_opts: Option<&VerifyOptions>,
) -> Result<CertificateResult, CertifyError> {
    problem.validate()?;
    let field = problem.field.without_input();
    let sub = max_sublevel(&field, &problem.v, problem.degrees.lyapunov, &problem.options, solver)?;
    let h0 = sub.c_star;
    let spec = TraceSpec {
        field: &field,
        v: &problem.v,
        gamma: problem.gamma,
        cert_degree: problem.cert_degree,
        unsafe_sets: &[],
        j_degrees: vec![],
        h0,
        gram_bound: problem.options.gram_bound,
    };
    let lp = Loop { v: &problem.v, cert_degree: problem.cert_degree, options: &problem.options };
    let mut result = lp.run(
        sub,
        |h| margin_search(h, &field, &problem.v, problem.gamma, &problem.degrees, None, solver),
        |m| trace_search(&spec, &m.l1, &m.l2, solver),
    )?;
    if let Some(opts) = verify_opts {
        let cert = verify::Certificate {
            field: &field,
            v: &problem.v,
            h: &result.h,
            controller: None,
            unsafe_sets: &[],
            gamma: problem.gamma,
        };
        result.report = Some(verified(&cert, &result, opts)?);
    }
    Ok(result)
}

/// Co-synthesize a controller and a safe region of stabilization.
pub fn synthesize_safe_region(
    problem: &SafeStabilizationProblem,
    solver: &dyn SdpSolver,
    verify_opts: Option<&VerifyOptions>,
) -> Result<CertificateResult, CertifyError> {
    problem.validate()?;
    let n = problem.field.dim();
    if let Some(q) = problem.unsafe_sets.iter().find(|q| q.eval(&vec![0.0; n]) < 0.0) {
        return Err(CertifyError::InvalidProblem(format!("origin lies in an unsafe set ({})", q.to_string_default())));
    }
    let sub = max_sublevel_controlled(problem, solver)?;
    let h0 = sub.c_star;
    let j_degrees: Vec<u32> =
        problem.unsafe_sets.iter().map(|q| problem.degrees.containment_for(problem.cert_degree, q)).collect();
    let ctrl = Some((problem.controller_degree, problem.coeff_bound));
    let lp = Loop { v: &problem.v, cert_degree: problem.cert_degree, options: &problem.options };
    let mut result = lp.run(
        sub,
        |h| margin_search(h, &problem.field, &problem.v, problem.gamma, &problem.degrees, ctrl, solver),
        |m| {
            let closed = problem.field.closed_loop(m.u.as_deref().expect("controlled margin"))?;
            let spec = TraceSpec {
                field: &closed,
                v: &problem.v,
                gamma: problem.gamma,
                cert_degree: problem.cert_degree,
                unsafe_sets: &problem.unsafe_sets,
                j_degrees: j_degrees.clone(),
                h0,
                gram_bound: problem.options.gram_bound,
            };
            trace_search(&spec, &m.l1, &m.l2, solver)
        },
    )?;
    if let Some(opts) = verify_opts {
        let u = result.u.clone().expect("controller synthesized");
        let cert = verify::Certificate {
            field: &problem.field,
            v: &problem.v,
            h: &result.h,
            controller: Some(&u),
            unsafe_sets: &problem.unsafe_sets,
            gamma: problem.gamma,
        };
        result.report = Some(verified(&cert, &result, opts)?);
    }
    Ok(result)
}
