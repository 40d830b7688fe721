//! Numerical validation of certificates: sampled inequality checks, the
//! min-norm CLF/CBF QP controller, RK4 simulation and volume estimates.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polynomial::{PolyError, PolyVectorField, Polynomial};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("region {{h >= 0}} reaches the sampling box boundary at {point:?}")]
    BoxTooSmall { point: Vec<f64> },
    #[error("QP controller infeasible at {state:?}")]
    QpInfeasible { state: Vec<f64> },
    #[error("trajectory diverged at t = {time}")]
    Diverged { time: f64 },
    #[error("not an ellipsoid: {0}")]
    NotEllipsoid(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no samples of the region found")]
    EmptyRegion,
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// Axis-aligned box `[lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, VerifyError> {
        if lo.len() != hi.len() || lo.is_empty() || lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(VerifyError::InvalidArgument("box bounds must satisfy lo < hi".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn symmetric(half_widths: &[f64]) -> Result<Self, VerifyError> {
        Self::new(half_widths.iter().map(|w| -w).collect(), half_widths.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    fn at(&self, unit: impl Iterator<Item = f64>) -> Vec<f64> {
        unit.zip(self.lo.iter().zip(&self.hi)).map(|(t, (a, b))| a + t * (b - a)).collect()
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &DomainBox) -> DomainBox {
        DomainBox {
            lo: self.lo.iter().zip(&other.lo).map(|(a, b)| a.min(*b)).collect(),
            hi: self.hi.iter().zip(&other.hi).map(|(a, b)| a.max(*b)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub samples: usize,
    pub worst_margin: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, samples: usize, worst_margin: f64, threshold: f64) -> Self {
        Self { name: name.into(), samples, worst_margin, threshold, passed: worst_margin >= threshold }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub initial: Vec<f64>,
    pub min_h: f64,
    pub min_q: Option<f64>,
    pub final_norm: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeEstimate {
    pub volume: f64,
    pub standard_error: f64,
    pub samples: usize,
    pub domain: DomainBox,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckResult>,
    pub trajectories: Vec<TrajectorySummary>,
    pub region_volume: Option<VolumeEstimate>,
    pub sublevel_volume: Option<VolumeEstimate>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Option<Vec<Vec<f64>>>,
}

/// Everything needed to check a synthesized certificate.
#[derive(Debug, Clone, Copy)]
pub struct Certificate<'a> {
    pub field: &'a PolyVectorField,
    pub v: &'a Polynomial,
    pub h: &'a Polynomial,
    pub controller: Option<&'a [Polynomial]>,
    pub unsafe_sets: &'a [Polynomial],
    pub gamma: f64,
}

impl Certificate<'_> {
    /// Vector field with the polynomial controller substituted.
    pub fn closed_loop(&self) -> Result<PolyVectorField, VerifyError> {
        Ok(match self.controller {
            Some(u) => self.field.closed_loop(u)?,
            None => self.field.without_input(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyOptions {
    pub samples: usize,
    pub origin_radius: f64,
    pub threshold: f64,
    pub trajectories: usize,
    pub trajectory_threshold: f64,
    pub final_norm: f64,
    pub dt: f64,
    /// Simulation horizon; derived from the linearization when absent.
    pub horizon: Option<f64>,
    pub qp_samples: usize,
    pub qp_threshold: f64,
    pub volume_samples: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            samples: 100_000,
            origin_radius: 1e-3,
            threshold: -1e-6,
            trajectories: 100,
            trajectory_threshold: -1e-4,
            final_norm: 1e-2,
            dt: 1e-2,
            horizon: None,
            qp_samples: 10_000,
            qp_threshold: -1e-9,
            volume_samples: 1_000_000,
            seed: 0,
        }
    }
}

/// Scrambled Sobol points in the box whose `h` value is nonnegative.
///
/// The generator is limited to 2^16 points per scramble, so longer runs
/// continue with independently scrambled blocks.
pub fn sobol_region_samples(h: &Polynomial, domain: &DomainBox, count: usize, seed: u32) -> Vec<Vec<f64>> {
    const BLOCK: u32 = 1 << 16;
    let n = domain.dim() as u32;
    let mut out = Vec::with_capacity(count);
    let max_draws = (count as u64).saturating_mul(1000).min(u32::MAX as u64) as u32;
    for i in 0..max_draws {
        if out.len() == count {
            break;
        }
        let block_seed = seed ^ (i / BLOCK).wrapping_mul(0x9e37_79b9);
        let x = domain.at((0..n).map(|d| sobol_burley::sample(i % BLOCK, d, block_seed) as f64));
        if h.eval(&x) >= 0.0 {
            out.push(x);
        }
    }
    out
}

/// Uniform PRNG samples of `{h >= 0}` by rejection.
pub fn uniform_region_samples(h: &Polynomial, domain: &DomainBox, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    let mut draws = 0usize;
    while out.len() < count && draws < count.saturating_mul(10_000) {
        draws += 1;
        let x = domain.at((0..domain.dim()).map(|_| rng.random::<f64>()));
        if h.eval(&x) >= 0.0 {
            out.push(x);
        }
    }
    out
}

/// Fails if `h >= 0` anywhere on a dense sample of the box faces.
pub fn check_box_contains(h: &Polynomial, domain: &DomainBox, per_face: usize, seed: u64) -> Result<(), VerifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = domain.dim();
    for axis in 0..n {
        for side in [domain.lo[axis], domain.hi[axis]] {
            for _ in 0..per_face {
                let mut x = domain.at((0..n).map(|_| rng.random::<f64>()));
                x[axis] = side;
                if h.eval(&x) >= 0.0 {
                    return Err(VerifyError::BoxTooSmall { point: x });
                }
            }
        }
    }
    Ok(())
}

/// Box around `{h >= 0}`: 1.5 times its extent, measured exactly for
/// ellipsoids and by radial search from the origin otherwise.
pub fn bounding_box(h: &Polynomial) -> Result<DomainBox, VerifyError> {
    let n = h.nvars();
    if let Ok(q) = QuadraticForm::of(h) {
        if let Ok(ext) = q.extent() {
            let (center, half) = ext;
            return DomainBox::new(
                center.iter().zip(&half).map(|(c, w)| c - 1.5 * w.max(1e-6)).collect(),
                center.iter().zip(&half).map(|(c, w)| c + 1.5 * w.max(1e-6)).collect(),
            );
        }
    }
    if h.eval(&vec![0.0; n]) < 0.0 {
        return Err(VerifyError::InvalidArgument("origin is outside {h >= 0}".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut half = vec![0.0f64; n];
    for _ in 0..4000 {
        let mut d: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        d.iter_mut().for_each(|v| *v /= norm);
        let r = last_nonnegative_radius(h, &vec![0.0; n], &d, 1e4)
            .ok_or_else(|| VerifyError::InvalidArgument("region appears unbounded".into()))?;
        for (w, di) in half.iter_mut().zip(&d) {
            *w = w.max((r * di).abs());
        }
    }
    DomainBox::symmetric(&half.iter().map(|w| 1.5 * w.max(1e-6)).collect::<Vec<_>>())
}

/// Largest sampled radius along `dir` from `center` where `h >= 0`, up to
/// `r_max`. `None` if `h >= 0` at `r_max`.
fn last_nonnegative_radius(h: &Polynomial, center: &[f64], dir: &[f64], r_max: f64) -> Option<f64> {
    let point = |r: f64| -> Vec<f64> { center.iter().zip(dir).map(|(c, d)| c + r * d).collect() };
    // geometric march outward to the last nonnegative point
    let mut r = 1e-3;
    let mut last_ok = 0.0;
    while r <= r_max {
        if h.eval(&point(r)) >= 0.0 {
            last_ok = r;
        }
        r *= 1.02;
    }
    if h.eval(&point(r_max)) >= 0.0 {
        return None;
    }
    let (mut lo, mut hi) = (last_ok, last_ok * 1.02 + 1e-3);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if h.eval(&point(mid)) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo)
}

/// Sampled Lyapunov, barrier and containment conditions on `{h >= 0}`.
pub fn check_barrier_conditions(
    cert: &Certificate,
    domain: &DomainBox,
    opts: &VerifyOptions,
) -> Result<Vec<CheckResult>, VerifyError> {
    check_box_contains(cert.h, domain, 2000, opts.seed)?;
    let field = cert.closed_loop()?;
    let vdot = cert.v.lie_derivative(&field)?;
    let hdot = cert.h.lie_derivative(&field)?;
    let samples = sobol_region_samples(cert.h, domain, opts.samples, opts.seed as u32);
    if samples.is_empty() {
        return Err(VerifyError::EmptyRegion);
    }
    let mut worst_v = f64::INFINITY;
    let mut worst_h = f64::INFINITY;
    let mut worst_q = f64::INFINITY;
    let mut counted_v = 0;
    for x in &samples {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        if r2 > opts.origin_radius * opts.origin_radius {
            worst_v = worst_v.min(-vdot.eval(x));
            counted_v += 1;
        }
        worst_h = worst_h.min(hdot.eval(x) + cert.gamma * cert.h.eval(x));
        for q in cert.unsafe_sets {
            worst_q = worst_q.min(q.eval(x));
        }
    }
    let mut out = vec![
        CheckResult::new("lyapunov_decrease", counted_v, worst_v, opts.threshold),
        CheckResult::new("barrier", samples.len(), worst_h, opts.threshold),
    ];
    if !cert.unsafe_sets.is_empty() {
        out.push(CheckResult::new("containment", samples.len(), worst_q, opts.threshold));
    }
    Ok(out)
}

/// Rows `a^T u <= b` of the CLF/CBF QP at `x`, with `delta = 0`.
pub fn qp_constraints(
    x: &[f64],
    v: &Polynomial,
    h: &Polynomial,
    field: &PolyVectorField,
    gamma: f64,
) -> [(Vec<f64>, f64); 2] {
    let f = field.eval_drift(x);
    let g = field.eval_input(x);
    let m = field.control_dim();
    let grad_v: Vec<f64> = v.gradient().iter().map(|p| p.eval(x)).collect();
    let grad_h: Vec<f64> = h.gradient().iter().map(|p| p.eval(x)).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let lg = |grad: &[f64]| -> Vec<f64> { (0..m).map(|j| (0..x.len()).map(|i| grad[i] * g[i][j]).sum()).collect() };
    let clf = (lg(&grad_v), -dot(&grad_v, &f));
    let cbf = (lg(&grad_h).iter().map(|a| -a).collect(), dot(&grad_h, &f) + gamma * h.eval(x));
    [clf, cbf]
}

/// Minimum-norm `u` with `dV/dx (f + g u) <= 0` and
/// `dh/dx (f + g u) >= -gamma h`, by enumerating the four active sets.
pub fn qp_controller(
    x: &[f64],
    v: &Polynomial,
    h: &Polynomial,
    field: &PolyVectorField,
    gamma: f64,
) -> Result<Vec<f64>, VerifyError> {
    let rows = qp_constraints(x, v, h, field, gamma);
    let m = field.control_dim();
    let feasible = |u: &[f64]| {
        rows.iter().all(|(a, b)| {
            let lhs: f64 = a.iter().zip(u).map(|(p, q)| p * q).sum();
            lhs - b <= 1e-10 * (1.0 + b.abs())
        })
    };
    let mut candidates: Vec<Vec<f64>> = vec![vec![0.0; m]];
    for (a, b) in &rows {
        let aa: f64 = a.iter().map(|v| v * v).sum();
        if aa > 0.0 {
            candidates.push(a.iter().map(|v| v * b / aa).collect());
        }
    }
    let a = DMatrix::from_fn(2, m, |r, c| rows[r].0[c]);
    let gram = &a * a.transpose();
    if let Some(inv) = gram.try_inverse() {
        let bvec = DVector::from_vec(vec![rows[0].1, rows[1].1]);
        let u = a.transpose() * inv * bvec;
        candidates.push(u.iter().copied().collect());
    }
    candidates
        .into_iter()
        .filter(|u| feasible(u))
        .min_by(|p, q| norm(p).total_cmp(&norm(q)))
        .ok_or_else(|| VerifyError::QpInfeasible { state: x.to_vec() })
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Worst constraint slack `b - a^T u` of the QP solution over samples of
/// the region.
pub fn check_qp_feasibility(
    cert: &Certificate,
    domain: &DomainBox,
    opts: &VerifyOptions,
) -> Result<CheckResult, VerifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x51);
    let samples = uniform_region_samples(cert.h, domain, opts.qp_samples, &mut rng);
    let mut worst = f64::INFINITY;
    for x in &samples {
        match qp_controller(x, cert.v, cert.h, cert.field, cert.gamma) {
            Ok(u) => {
                for (a, b) in qp_constraints(x, cert.v, cert.h, cert.field, cert.gamma) {
                    let lhs: f64 = a.iter().zip(&u).map(|(p, q)| p * q).sum();
                    worst = worst.min(b - lhs);
                }
            }
            Err(_) => worst = f64::NEG_INFINITY,
        }
    }
    Ok(CheckResult::new("qp_feasibility", samples.len(), worst, opts.qp_threshold))
}

/// Classic fixed-step RK4. The controller, if any, is evaluated at every stage.
pub fn simulate(
    field: &PolyVectorField,
    controller: Option<&dyn Fn(&[f64]) -> Vec<f64>>,
    x0: &[f64],
    dt: f64,
    horizon: f64,
) -> Result<Trajectory, VerifyError> {
    if !(dt > 0.0) || !(horizon >= dt) {
        return Err(VerifyError::InvalidArgument(format!("need dt > 0 and T >= dt, got dt={dt}, T={horizon}")));
    }
    let steps = (horizon / dt).round() as usize;
    let rhs = |x: &[f64]| -> (Vec<f64>, Option<Vec<f64>>) {
        match controller {
            Some(c) => {
                let u = c(x);
                (field.eval_with_input(x, &u), Some(u))
            }
            None => (field.eval_drift(x), None),
        }
    };
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = controller.map(|_| Vec::with_capacity(steps + 1));
    let mut x = x0.to_vec();
    for k in 0..=steps {
        let t = k as f64 * dt;
        let (k1, u) = rhs(&x);
        times.push(t);
        states.push(x.clone());
        if let (Some(list), Some(u)) = (inputs.as_mut(), u) {
            list.push(u);
        }
        if k == steps {
            break;
        }
        let shift = |x: &[f64], k: &[f64], s: f64| -> Vec<f64> { x.iter().zip(k).map(|(a, b)| a + s * b).collect() };
        let (k2, _) = rhs(&shift(&x, &k1, dt / 2.0));
        let (k3, _) = rhs(&shift(&x, &k2, dt / 2.0));
        let (k4, _) = rhs(&shift(&x, &k3, dt));
        for i in 0..x.len() {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !(norm(&x) <= 1e6) {
            return Err(VerifyError::Diverged { time: t + dt });
        }
    }
    Ok(Trajectory { times, states, inputs })
}

/// `20 / |Re λ|` for the least stable eigenvalue of the linearization at
/// the origin.
pub fn default_horizon(field: &PolyVectorField) -> f64 {
    let n = field.dim();
    let origin = vec![0.0; n];
    let jac = DMatrix::from_fn(n, n, |i, j| field.drift()[i].gradient()[j].eval(&origin));
    let worst = jac.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    if worst < -1e-6 {
        20.0 / worst.abs()
    } else {
        20.0
    }
}

pub fn check_trajectories(
    cert: &Certificate,
    domain: &DomainBox,
    opts: &VerifyOptions,
) -> Result<(Vec<CheckResult>, Vec<TrajectorySummary>), VerifyError> {
    let field = cert.closed_loop()?;
    let horizon = opts.horizon.unwrap_or_else(|| default_horizon(&field));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7a);
    let starts = uniform_region_samples(cert.h, domain, opts.trajectories, &mut rng);
    let mut summaries = Vec::with_capacity(starts.len());
    for x0 in starts {
        let summary = match simulate(&field, None, &x0, opts.dt, horizon) {
            Ok(tr) => {
                let min_h = tr.states.iter().map(|x| cert.h.eval(x)).fold(f64::INFINITY, f64::min);
                let min_q = (!cert.unsafe_sets.is_empty()).then(|| {
                    tr.states
                        .iter()
                        .flat_map(|x| cert.unsafe_sets.iter().map(move |q| q.eval(x)))
                        .fold(f64::INFINITY, f64::min)
                });
                let final_norm = norm(tr.states.last().expect("nonempty trajectory"));
                TrajectorySummary { initial: x0, min_h, min_q, final_norm, diverged: false }
            }
            Err(VerifyError::Diverged { .. }) => TrajectorySummary {
                initial: x0,
                min_h: f64::NEG_INFINITY,
                min_q: None,
                final_norm: f64::INFINITY,
                diverged: true,
            },
            Err(e) => return Err(e),
        };
        summaries.push(summary);
    }
    let n = summaries.len();
    let worst_h = summaries.iter().map(|s| s.min_h).fold(f64::INFINITY, f64::min);
    let worst_norm = summaries.iter().map(|s| s.final_norm).fold(0.0, f64::max);
    let mut checks = vec![
        CheckResult::new("trajectory_invariance", n, worst_h, opts.trajectory_threshold),
        // margin: how far below the norm bound the worst final state is
        CheckResult::new("trajectory_convergence", n, opts.final_norm - worst_norm, 0.0),
    ];
    if !cert.unsafe_sets.is_empty() {
        let worst_q = summaries
            .iter()
            .map(|s| if s.diverged { f64::NEG_INFINITY } else { s.min_q.unwrap_or(f64::INFINITY) })
            .fold(f64::INFINITY, f64::min);
        checks.push(CheckResult::new("trajectory_safety", n, worst_q, opts.trajectory_threshold));
    }
    Ok((checks, summaries))
}

/// Monte Carlo volume of `{h >= 0}` within `domain`.
pub fn estimate_volume(h: &Polynomial, domain: &DomainBox, n: usize, seed: u64) -> Result<VolumeEstimate, VerifyError> {
    if n == 0 {
        return Err(VerifyError::InvalidArgument("sample count must be positive".into()));
    }
    check_box_contains(h, domain, 2000, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = domain.dim();
    let mut x = vec![0.0; d];
    let mut hits = 0usize;
    for _ in 0..n {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = domain.lo[i] + rng.random::<f64>() * (domain.hi[i] - domain.lo[i]);
        }
        if h.eval(&x) >= 0.0 {
            hits += 1;
        }
    }
    let p = hits as f64 / n as f64;
    let vol = domain.volume();
    Ok(VolumeEstimate {
        volume: p * vol,
        standard_error: vol * (p * (1.0 - p) / n as f64).sqrt(),
        samples: n,
        domain: domain.clone(),
    })
}

/// Volumes of `{h >= 0}` and `{g >= 0}` from the same samples over a box
/// enclosing both.
pub fn compare_volumes(
    h: &Polynomial,
    g: &Polynomial,
    n: usize,
    seed: u64,
) -> Result<(VolumeEstimate, VolumeEstimate), VerifyError> {
    let domain = bounding_box(h)?.union(&bounding_box(g)?);
    Ok((estimate_volume(h, &domain, n, seed)?, estimate_volume(g, &domain, n, seed)?))
}

/// `h = c + b^T x + x^T A x`.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
}

impl QuadraticForm {
    pub fn of(h: &Polynomial) -> Result<Self, VerifyError> {
        if h.degree() > 2 {
            return Err(VerifyError::NotEllipsoid(format!("degree {} > 2", h.degree())));
        }
        let n = h.nvars();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        let mut c = 0.0;
        for (m, v) in h.terms() {
            let e = m.exponents();
            let nz: Vec<usize> = (0..n).filter(|&i| e[i] > 0).collect();
            match (m.degree(), nz.as_slice()) {
                (0, _) => c = v,
                (1, [i]) => b[*i] = v,
                (2, [i]) => a[(*i, *i)] = v,
                (2, [i, j]) => {
                    a[(*i, *j)] = v / 2.0;
                    a[(*j, *i)] = v / 2.0;
                }
                _ => unreachable!(),
            }
        }
        Ok(Self { a, b, c })
    }

    /// Center, squared "radius" `h(center)` and `-A` factorization check.
    fn center(&self) -> Result<(DVector<f64>, f64), VerifyError> {
        let neg = -&self.a;
        let chol = neg
            .cholesky()
            .ok_or_else(|| VerifyError::NotEllipsoid("quadratic part is not negative definite".into()))?;
        // grad = b + 2 A x = 0  →  x = (-A)^{-1} b / 2
        let center = chol.solve(&self.b) * 0.5;
        let r = self.c + self.b.dot(&center) + center.dot(&(&self.a * &center));
        Ok((center, r))
    }

    /// Center and half-widths of the axis-aligned bounding box.
    pub fn extent(&self) -> Result<(Vec<f64>, Vec<f64>), VerifyError> {
        let (center, r) = self.center()?;
        let inv = (-&self.a).try_inverse().ok_or_else(|| VerifyError::NotEllipsoid("singular".into()))?;
        let r = r.max(0.0);
        let half = (0..center.len()).map(|i| (r * inv[(i, i)]).sqrt()).collect();
        Ok((center.iter().copied().collect(), half))
    }
}

fn unit_ball_volume(n: usize) -> f64 {
    // V_n = 2π/n · V_{n-2}
    match n {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * PI / n as f64 * unit_ball_volume(n - 2),
    }
}

/// Closed-form volume of `{h >= 0}` for quadratic `h` with negative
/// definite quadratic part.
pub fn ellipsoid_volume(h: &Polynomial) -> Result<f64, VerifyError> {
    let q = QuadraticForm::of(h)?;
    let (_, r) = q.center()?;
    if r <= 0.0 {
        return Ok(0.0);
    }
    let n = h.nvars();
    let det = (-&q.a).determinant();
    Ok(unit_ball_volume(n) * r.powf(n as f64 / 2.0) / det.sqrt())
}

/// Points on `{p = 0}` found by bisection along rays from `center`, where
/// `p(center)` and the far field have opposite signs.
pub fn level_set_points(p: &Polynomial, center: &[f64], rays: usize, r_max: f64) -> Vec<Vec<f64>> {
    let n = center.len();
    let sign0 = p.eval(center) >= 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut out = Vec::with_capacity(rays);
    for k in 0..rays {
        let dir: Vec<f64> = if n == 2 {
            let t = 2.0 * PI * k as f64 / rays as f64;
            vec![t.cos(), t.sin()]
        } else {
            let mut d: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let nr = norm(&d);
            d.iter_mut().for_each(|v| *v /= nr);
            d
        };
        let point = |r: f64| -> Vec<f64> { center.iter().zip(&dir).map(|(c, d)| c + r * d).collect() };
        let step = r_max / 2000.0;
        let mut r = step;
        while r <= r_max && (p.eval(&point(r)) >= 0.0) == sign0 {
            r += step;
        }
        if r > r_max {
            continue;
        }
        let (mut lo, mut hi) = (r - step, r);
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if (p.eval(&point(mid)) >= 0.0) == sign0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        out.push(point(0.5 * (lo + hi)));
    }
    out
}

/// Minimum distance between two sampled point sets.
pub fn min_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for p in a {
        for q in b {
            let d: f64 = p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum();
            best = best.min(d);
        }
    }
    best.sqrt()
}

/// Full verification suite for a certificate.
pub fn verify_certificate(cert: &Certificate, opts: &VerifyOptions) -> Result<VerificationReport, VerifyError> {
    let domain = bounding_box(cert.h)?;
    let mut report = VerificationReport { checks: check_barrier_conditions(cert, &domain, opts)?, ..Default::default() };
    if cert.controller.is_some() {
        report.checks.push(check_qp_feasibility(cert, &domain, opts)?);
    }
    let (checks, trajectories) = check_trajectories(cert, &domain, opts)?;
    report.checks.extend(checks);
    report.trajectories = trajectories;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polynomial::VariableSet;
    use approx::assert_abs_diff_eq;

    fn p(s: &str, n: usize) -> Polynomial {
        Polynomial::parse(s, &VariableSet::indexed(n)).unwrap()
    }

    fn field(f: &[&str], n: usize) -> PolyVectorField {
        PolyVectorField::autonomous(f.iter().map(|s| p(s, n)).collect()).unwrap()
    }

    #[test]
    fn unstable_system_fails_lyapunov_check() {
        let f = field(&["x1"], 1);
        let (v, h) = (p("x1^2", 1), p("1 - x1^2", 1));
        let cert = Certificate { field: &f, v: &v, h: &h, controller: None, unsafe_sets: &[], gamma: 1.0 };
        let domain = bounding_box(&h).unwrap();
        let opts = VerifyOptions { samples: 2000, ..Default::default() };
        let checks = check_barrier_conditions(&cert, &domain, &opts).unwrap();
        assert!(!checks[0].passed);
    }

    #[test]
    fn containment_violation_detected() {
        let f = field(&["-x1", "-x2"], 2);
        let (v, h) = (p("x1^2 + x2^2", 2), p("4 - x1^2 - x2^2", 2));
        let q = [p("(x1 - 1)^2 + x2^2 - 0.25", 2)];
        let cert = Certificate { field: &f, v: &v, h: &h, controller: None, unsafe_sets: &q, gamma: 1.0 };
        let domain = bounding_box(&h).unwrap();
        let opts = VerifyOptions { samples: 5000, ..Default::default() };
        let checks = check_barrier_conditions(&cert, &domain, &opts).unwrap();
        let c = checks.iter().find(|c| c.name == "containment").unwrap();
        assert!(!c.passed && c.worst_margin < -0.1);
        assert!(checks.iter().filter(|c| c.name != "containment").all(|c| c.passed));
    }

    #[test]
    fn qp_examples() {
        let f = PolyVectorField::control_affine(vec![Polynomial::zero(1)], vec![vec![Polynomial::constant(1, 1.0)]])
            .unwrap();
        let (v, h) = (p("x1^2", 1), p("1 - x1^2", 1));
        assert_eq!(qp_controller(&[0.0], &v, &h, &f, 1.0).unwrap(), vec![0.0]);
        assert_eq!(qp_controller(&[0.5], &v, &h, &f, 1.0).unwrap(), vec![0.0]);
    }

    #[test]
    fn qp_single_binding_row_projection() {
        // ẋ = [1, 0] + I u, V = |x|^2 at x = (1, 0): CLF row 2 u1 <= -2 binds
        let f = PolyVectorField::control_affine(
            vec![Polynomial::constant(2, 1.0), Polynomial::zero(2)],
            vec![
                vec![Polynomial::constant(2, 1.0), Polynomial::zero(2)],
                vec![Polynomial::zero(2), Polynomial::constant(2, 1.0)],
            ],
        )
        .unwrap();
        let (v, h) = (p("x1^2 + x2^2", 2), p("4 - x1^2 - x2^2", 2));
        let u = qp_controller(&[1.0, 0.0], &v, &h, &f, 1.0).unwrap();
        // KKT oracle: u = a b / |a|^2 with a = (2, 0), b = -2
        assert_abs_diff_eq!(u[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(u[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn simulate_examples() {
        let f = field(&["-x1"], 1);
        let tr = simulate(&f, None, &[1.0], 0.01, 10.0).unwrap();
        assert_eq!(tr.states.len(), 1001);
        assert_abs_diff_eq!(tr.states.last().unwrap()[0], (-10.0f64).exp(), epsilon = 1e-6);
        let tr0 = simulate(&f, None, &[0.0], 0.01, 1.0).unwrap();
        assert!(tr0.states.iter().all(|x| x[0] == 0.0));
        let blow = field(&["x1^2"], 1);
        assert!(matches!(simulate(&blow, None, &[1.0], 0.01, 5.0), Err(VerifyError::Diverged { .. })));
        assert!(simulate(&f, None, &[1.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn volume_examples() {
        let disk = p("1 - x1^2 - x2^2", 2);
        let est = estimate_volume(&disk, &DomainBox::symmetric(&[2.0, 2.0]).unwrap(), 1_000_000, 1).unwrap();
        assert!((est.volume - PI).abs() <= 3.0 * est.standard_error);
        let ball = p("8 - x1^2 - x2^2 - x3^2", 3);
        let exact = 4.0 / 3.0 * PI * 8f64.powf(1.5);
        assert_abs_diff_eq!(ellipsoid_volume(&ball).unwrap(), exact, epsilon = 1e-9);
        let est = estimate_volume(&ball, &DomainBox::symmetric(&[3.0; 3]).unwrap(), 1_000_000, 2).unwrap();
        assert!((est.volume - exact).abs() <= 3.0 * est.standard_error);
        let empty = estimate_volume(&Polynomial::constant(2, -1.0), &DomainBox::symmetric(&[1.0, 1.0]).unwrap(), 1000, 0)
            .unwrap();
        assert_eq!(empty.volume, 0.0);
        assert!(estimate_volume(&disk, &DomainBox::symmetric(&[0.5, 0.5]).unwrap(), 1000, 0).is_err());
    }

    #[test]
    fn ellipsoid_examples() {
        assert_abs_diff_eq!(ellipsoid_volume(&p("1 - x1^2 - x2^2", 2)).unwrap(), PI, epsilon = 1e-12);
        assert!(ellipsoid_volume(&p("1 + x1^2", 1)).is_err());
        let h2 = p("7.9999 - 1.2828*x3^2 - 0.2850*x1^2 - 0.5652*x2^2 - 0.6685*x1*x2", 3);
        let v1 = ellipsoid_volume(&p("8 - x1^2 - x2^2 - x3^2", 3)).unwrap();
        let ratio = ellipsoid_volume(&h2).unwrap() / v1;
        assert!((ratio - 3.974).abs() < 0.01, "{ratio}");
        // shifted ellipse: area unchanged by translation
        let shifted = p("1 - (x1 - 2)^2 - 4*(x2 + 1)^2", 2);
        assert_abs_diff_eq!(ellipsoid_volume(&shifted).unwrap(), PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn bounding_boxes() {
        let b = bounding_box(&p("4 - x1^2 - 4*x2^2", 2)).unwrap();
        assert_abs_diff_eq!(b.hi[0], 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(b.hi[1], 1.5, epsilon = 1e-9);
        let quartic = p("1 - x1^4 - x2^4", 2);
        let b = bounding_box(&quartic).unwrap();
        assert!(b.hi[0] > 1.45 && b.hi[0] < 1.51, "{:?}", b);
        check_box_contains(&quartic, &b, 1000, 0).unwrap();
    }

    #[test]
    fn horizon_from_linearization() {
        let f = field(&["x2", "-x1 - x2"], 2);
        assert_abs_diff_eq!(default_horizon(&f), 40.0, epsilon = 1e-9);
    }

    #[test]
    fn level_set_distance() {
        let circle = p("1 - x1^2 - x2^2", 2);
        let other = p("(x1 - 3)^2 + x2^2 - 1", 2);
        let a = level_set_points(&circle, &[0.0, 0.0], 720, 10.0);
        let b = level_set_points(&other, &[3.0, 0.0], 720, 10.0);
        assert_abs_diff_eq!(min_distance(&a, &b), 1.0, epsilon = 1e-6);
    }
}
