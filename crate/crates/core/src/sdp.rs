//! Block semidefinite programming.
//!
//! Standard form: optimize `<c, x>` subject to `A x = b`, where `x` collects
//! free scalars and symmetric blocks `X_k ⪰ 0`. Solved by a primal-dual
//! interior-point method on the homogeneous self-dual embedding, with
//! Nesterov–Todd scaling and Mehrotra predictor-corrector steps.

use std::f64::consts::SQRT_2;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::smr::packed_len;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SdpError {
    #[error("row {row}: {msg}")]
    InvalidRow { row: usize, msg: String },
    #[error("objective: {0}")]
    InvalidObjective(String),
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error("dump line {line}: {msg}")]
    Dump { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sense {
    #[default]
    Minimize,
    Maximize,
}

/// A scalar entry of the decision vector. Block entries are addressed by
/// their upper triangle (`i <= j`); a coefficient on `Entry` multiplies the
/// value `X_ij` once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    Free(usize),
    Entry { block: usize, i: usize, j: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub terms: Vec<(Var, f64)>,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SdpProblem {
    pub sense: Sense,
    pub blocks: Vec<usize>,
    pub free: usize,
    pub rows: Vec<Row>,
    pub objective: Vec<(Var, f64)>,
}

impl SdpProblem {
    pub fn new(sense: Sense) -> Self {
        Self { sense, ..Self::default() }
    }

    pub fn add_block(&mut self, dim: usize) -> usize {
        self.blocks.push(dim);
        self.blocks.len() - 1
    }

    /// Adds `count` free variables and returns the index of the first.
    pub fn add_free(&mut self, count: usize) -> usize {
        self.free += count;
        self.free - count
    }

    pub fn add_row(&mut self, terms: Vec<(Var, f64)>, rhs: f64) -> usize {
        self.rows.push(Row { terms, rhs });
        self.rows.len() - 1
    }

    pub fn set_objective(&mut self, terms: Vec<(Var, f64)>) {
        self.objective = terms;
    }

    fn check_var(&self, v: Var) -> Result<(), String> {
        match v {
            Var::Free(k) if k >= self.free => Err(format!("free variable {k} out of range")),
            Var::Entry { block, .. } if block >= self.blocks.len() => {
                Err(format!("block {block} out of range"))
            }
            Var::Entry { block, i, j } if i > j || j >= self.blocks[block] => {
                Err(format!("entry ({i},{j}) invalid for block {block} of size {}", self.blocks[block]))
            }
            _ => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<(), SdpError> {
        for (r, row) in self.rows.iter().enumerate() {
            for &(v, c) in &row.terms {
                self.check_var(v).map_err(|msg| SdpError::InvalidRow { row: r, msg })?;
                if !c.is_finite() {
                    return Err(SdpError::InvalidRow { row: r, msg: "non-finite coefficient".into() });
                }
            }
            if !row.rhs.is_finite() {
                return Err(SdpError::InvalidRow { row: r, msg: "non-finite right-hand side".into() });
            }
        }
        for &(v, c) in &self.objective {
            self.check_var(v).map_err(SdpError::InvalidObjective)?;
            if !c.is_finite() {
                return Err(SdpError::InvalidObjective("non-finite coefficient".into()));
            }
        }
        Ok(())
    }

    /// Sparse text form, one record per line:
    ///
    /// ```text
    /// sense min|max
    /// free <count>
    /// block <dim>                      # repeated, in order
    /// rows <count>
    /// rhs <row> <value>
    /// a <row> f <var> <coef>
    /// a <row> b <block> <i> <j> <coef>
    /// c f <var> <coef>
    /// c b <block> <i> <j> <coef>
    /// ```
    ///
    /// `#` starts a comment. Indices are zero-based.
    pub fn to_dump(&self) -> String {
        let mut s = String::new();
        let sense = match self.sense {
            Sense::Minimize => "min",
            Sense::Maximize => "max",
        };
        let _ = writeln!(s, "sense {sense}");
        let _ = writeln!(s, "free {}", self.free);
        for d in &self.blocks {
            let _ = writeln!(s, "block {d}");
        }
        let _ = writeln!(s, "rows {}", self.rows.len());
        let var = |v: Var| match v {
            Var::Free(k) => format!("f {k}"),
            Var::Entry { block, i, j } => format!("b {block} {i} {j}"),
        };
        for (r, row) in self.rows.iter().enumerate() {
            if row.rhs != 0.0 {
                let _ = writeln!(s, "rhs {r} {:e}", row.rhs);
            }
            for &(v, c) in &row.terms {
                let _ = writeln!(s, "a {r} {} {c:e}", var(v));
            }
        }
        for &(v, c) in &self.objective {
            let _ = writeln!(s, "c {} {c:e}", var(v));
        }
        s
    }

    pub fn from_dump(text: &str) -> Result<Self, SdpError> {
        let mut p = SdpProblem::default();
        let mut nrows = None;
        for (ln, raw) in text.lines().enumerate() {
            let line = ln + 1;
            let err = |msg: &str| SdpError::Dump { line, msg: msg.to_string() };
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let tok: Vec<&str> = body.split_whitespace().collect();
            let num = |k: usize| -> Result<usize, SdpError> {
                tok.get(k).and_then(|t| t.parse().ok()).ok_or_else(|| err("expected an index"))
            };
            let real = |k: usize| -> Result<f64, SdpError> {
                tok.get(k).and_then(|t| t.parse().ok()).ok_or_else(|| err("expected a number"))
            };
            let var_at = |k: usize| -> Result<(Var, usize), SdpError> {
                match tok.get(k).copied() {
                    Some("f") => Ok((Var::Free(num(k + 1)?), k + 2)),
                    Some("b") => Ok((
                        Var::Entry { block: num(k + 1)?, i: num(k + 2)?, j: num(k + 3)? },
                        k + 4,
                    )),
                    _ => Err(err("expected 'f' or 'b'")),
                }
            };
            match tok[0] {
                "sense" => {
                    p.sense = match tok.get(1).copied() {
                        Some("min") => Sense::Minimize,
                        Some("max") => Sense::Maximize,
                        _ => return Err(err("sense must be min or max")),
                    }
                }
                "free" => p.free = num(1)?,
                "block" => p.blocks.push(num(1)?),
                "rows" => {
                    let m = num(1)?;
                    p.rows = vec![Row { terms: Vec::new(), rhs: 0.0 }; m];
                    nrows = Some(m);
                }
                "rhs" | "a" => {
                    let m = nrows.ok_or_else(|| err("row data before 'rows'"))?;
                    let r = num(1)?;
                    if r >= m {
                        return Err(err("row index out of range"));
                    }
                    if tok[0] == "rhs" {
                        p.rows[r].rhs = real(2)?;
                    } else {
                        let (v, k) = var_at(2)?;
                        p.rows[r].terms.push((v, real(k)?));
                    }
                }
                "c" => {
                    let (v, k) = var_at(1)?;
                    p.objective.push((v, real(k)?));
                }
                other => return Err(err(&format!("unknown record '{other}'"))),
            }
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    /// Converged only to the reduced tolerance before stalling.
    NearOptimal,
    Infeasible,
    Unbounded,
    MaxIterations,
    NumericalFailure,
}

impl SolveStatus {
    pub fn is_usable(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::NearOptimal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Certificate {
    /// `y` with `b^T y > 0`, `A^T y ⪯ 0` on blocks and `= 0` on free vars
    /// (minimization form).
    PrimalInfeasible { y: Vec<f64> },
    /// Improving ray: `A dx = 0`, `dx` in the cone, objective strictly better.
    DualInfeasible { blocks: Vec<DMatrix<f64>>, free: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution {
    pub status: SolveStatus,
    pub blocks: Vec<DMatrix<f64>>,
    pub free: Vec<f64>,
    pub y: Vec<f64>,
    pub dual_blocks: Vec<DMatrix<f64>>,
    pub objective: f64,
    pub dual_objective: f64,
    pub iterations: usize,
    pub residuals: Residuals,
    pub certificate: Option<Certificate>,
}

impl SdpSolution {
    /// Value of a decision-vector entry.
    pub fn value(&self, v: Var) -> f64 {
        match v {
            Var::Free(k) => self.free[k],
            Var::Entry { block, i, j } => self.blocks[block][(i, j)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub feasibility_tol: f64,
    pub gap_tol: f64,
    /// Tolerance accepted as `NearOptimal` when progress stalls.
    pub reduced_tol: f64,
    pub max_iterations: usize,
    pub step_fraction: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            feasibility_tol: 1e-8,
            gap_tol: 1e-8,
            reduced_tol: 1e-6,
            max_iterations: 200,
            step_fraction: 0.99,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), SdpError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(SdpError::InvalidOptions(format!("{name} must be positive, got {v}")))
            }
        };
        positive("feasibility_tol", self.feasibility_tol)?;
        positive("gap_tol", self.gap_tol)?;
        positive("reduced_tol", self.reduced_tol)?;
        if !(self.step_fraction > 0.0 && self.step_fraction < 1.0) {
            return Err(SdpError::InvalidOptions("step_fraction must lie in (0, 1)".into()));
        }
        if self.max_iterations == 0 {
            return Err(SdpError::InvalidOptions("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Anything that can solve an [`SdpProblem`].
pub trait SdpSolver {
    fn solve(&self, problem: &SdpProblem) -> Result<SdpSolution, SdpError>;
}

#[derive(Debug, Clone, Default)]
pub struct InteriorPoint {
    pub options: SolverOptions,
}

impl InteriorPoint {
    pub fn new(options: SolverOptions) -> Self {
        Self { options }
    }
}

impl SdpSolver for InteriorPoint {
    fn solve(&self, problem: &SdpProblem) -> Result<SdpSolution, SdpError> {
        solve(problem, &self.options)
    }
}

pub fn solve(problem: &SdpProblem, opts: &SolverOptions) -> Result<SdpSolution, SdpError> {
    problem.validate()?;
    opts.validate()?;
    Ok(Hsde::new(problem).run(opts))
}

fn scale(i: usize, j: usize) -> f64 {
    if i == j {
        1.0
    } else {
        SQRT_2
    }
}

/// Column layout: free variables first, then each block's scaled packed
/// upper triangle (`sqrt 2` on off-diagonal entries, so that the Euclidean
/// inner product matches the trace inner product).
struct Layout {
    nfree: usize,
    dims: Vec<usize>,
    offsets: Vec<usize>,
    n: usize,
}

impl Layout {
    fn new(p: &SdpProblem) -> Self {
        let mut offsets = Vec::with_capacity(p.blocks.len());
        let mut n = p.free;
        for &d in &p.blocks {
            offsets.push(n);
            n += packed_len(d);
        }
        Self { nfree: p.free, dims: p.blocks.clone(), offsets, n }
    }

    fn column(&self, v: Var) -> (usize, f64) {
        match v {
            Var::Free(k) => (k, 1.0),
            Var::Entry { block, i, j } => {
                let d = self.dims[block];
                (self.offsets[block] + crate::smr::packed_index(d, i, j), 1.0 / scale(i, j))
            }
        }
    }

    fn cone_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    fn unpack(&self, x: &DVector<f64>, k: usize) -> DMatrix<f64> {
        smat(x.as_slice(), self.offsets[k], self.dims[k])
    }
}

fn smat(v: &[f64], off: usize, d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    let mut idx = off;
    for i in 0..d {
        for j in i..d {
            let val = v[idx] / scale(i, j);
            m[(i, j)] = val;
            m[(j, i)] = val;
            idx += 1;
        }
    }
    m
}

fn svec_into(m: &DMatrix<f64>, out: &mut [f64]) {
    let d = m.nrows();
    let mut idx = 0;
    for i in 0..d {
        for j in i..d {
            out[idx] = 0.5 * (m[(i, j)] + m[(j, i)]) * scale(i, j);
            idx += 1;
        }
    }
}

/// Matrix of `v -> svec(W smat(v) W)`.
fn scaling_operator(w: &DMatrix<f64>) -> DMatrix<f64> {
    let d = w.nrows();
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect();
    let s = pairs.len();
    DMatrix::from_fn(s, s, |a, b| {
        let (i, j) = pairs[a];
        let (k, l) = pairs[b];
        scale(i, j) * scale(k, l) * 0.5 * (w[(i, k)] * w[(j, l)] + w[(i, l)] * w[(j, k)])
    })
}

fn sym_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let ab = a * b;
    (&ab + ab.transpose()) * 0.5
}

/// Largest `alpha` with `L L^T + alpha * d ⪰ 0`, given the Cholesky factor.
fn max_step_psd(l: &DMatrix<f64>, d: &DMatrix<f64>) -> f64 {
    let Some(linv) = l.clone().try_inverse() else {
        return 0.0;
    };
    let m = &linv * d * linv.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let emin = SymmetricEigen::new(m).eigenvalues.min();
    if emin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / emin
    }
}

fn max_step_scalar(v: f64, dv: f64) -> f64 {
    if dv >= 0.0 {
        f64::INFINITY
    } else {
        -v / dv
    }
}

struct BlockScaling {
    lx: DMatrix<f64>,
    lz: DMatrix<f64>,
    r: DMatrix<f64>,
    rinv: DMatrix<f64>,
    lambda: DVector<f64>,
    h: DMatrix<f64>,
}

struct Direction {
    x: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
    tau: f64,
    kappa: f64,
}

struct Hsde<'a> {
    problem: &'a SdpProblem,
    layout: Layout,
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: DVector<f64>,
    /// Row equilibration: scaled row = original row * row_scale.
    row_scale: DVector<f64>,
}

struct Iterate {
    x: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
    tau: f64,
    kappa: f64,
}

impl<'a> Hsde<'a> {
    fn new(problem: &'a SdpProblem) -> Self {
        let layout = Layout::new(problem);
        let m = problem.rows.len();
        let mut a = DMatrix::zeros(m, layout.n);
        let mut b = DVector::zeros(m);
        for (r, row) in problem.rows.iter().enumerate() {
            for &(v, coef) in &row.terms {
                let (col, f) = layout.column(v);
                a[(r, col)] += coef * f;
            }
            b[r] = row.rhs;
        }
        let mut c = DVector::zeros(layout.n);
        for &(v, coef) in &problem.objective {
            let (col, f) = layout.column(v);
            c[col] += coef * f;
        }
        if problem.sense == Sense::Maximize {
            c.neg_mut();
        }
        let row_scale = DVector::from_fn(m, |r, _| {
            let nrm = a.row(r).norm();
            if nrm > 0.0 {
                1.0 / nrm
            } else {
                1.0
            }
        });
        for r in 0..m {
            let s = row_scale[r];
            a.row_mut(r).scale_mut(s);
            b[r] *= s;
        }
        Self { problem, layout, a, b, c, row_scale }
    }

    fn initial(&self) -> Iterate {
        let mut x = DVector::zeros(self.layout.n);
        let mut z = DVector::zeros(self.layout.n);
        for (k, &d) in self.layout.dims.iter().enumerate() {
            let eye = DMatrix::<f64>::identity(d, d);
            let off = self.layout.offsets[k];
            svec_into(&eye, &mut x.as_mut_slice()[off..off + packed_len(d)]);
            svec_into(&eye, &mut z.as_mut_slice()[off..off + packed_len(d)]);
        }
        Iterate { x, y: DVector::zeros(self.a.nrows()), z, tau: 1.0, kappa: 1.0 }
    }

    fn block_range(&self, k: usize) -> std::ops::Range<usize> {
        let off = self.layout.offsets[k];
        off..off + packed_len(self.layout.dims[k])
    }

    fn run(&self, opts: &SolverOptions) -> SdpSolution {
        let nf = self.layout.nfree;
        let m = self.a.nrows();
        let nu = self.layout.cone_dim() as f64;
        let norm_b = self.b.norm();
        let norm_c = self.c.norm();
        let mut it = self.initial();
        let mut best: Option<(f64, Iterate)> = None;
        let mut stall = 0usize;
        let at = self.a.transpose();

        for iter in 0..=opts.max_iterations {
            let rp = &self.a * &it.x - &self.b * it.tau;
            let rd = &at * &it.y + &it.z - &self.c * it.tau;
            let rg = self.c.dot(&it.x) - self.b.dot(&it.y) + it.kappa;

            let pobj = self.c.dot(&it.x) / it.tau;
            let dobj = self.b.dot(&it.y) / it.tau;
            let pres = rp.norm() / it.tau / (1.0 + norm_b);
            let dres = rd.norm() / it.tau / (1.0 + norm_c);
            let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
            let merit = pres.max(dres).max(gap);

            if pres <= opts.feasibility_tol && dres <= opts.feasibility_tol && gap <= opts.gap_tol {
                return self.finish(SolveStatus::Optimal, &it, iter);
            }

            let by = self.b.dot(&it.y);
            let aty_z = (&at * &it.y + &it.z).norm();
            if it.kappa > it.tau && by > 0.0 && aty_z <= opts.feasibility_tol * by {
                return self.finish(SolveStatus::Infeasible, &it, iter);
            }
            let cx = self.c.dot(&it.x);
            let ax = (&self.a * &it.x).norm();
            if it.kappa > it.tau && cx < 0.0 && ax <= opts.feasibility_tol * (-cx) {
                return self.finish(SolveStatus::Unbounded, &it, iter);
            }

            if best.as_ref().is_none_or(|(bm, _)| merit < *bm) {
                best = Some((merit, Iterate { ..clone_iterate(&it) }));
            }
            if iter == opts.max_iterations {
                break;
            }

            let Some(scalings) = self.scalings(&it) else {
                break;
            };

            // reduced system K = [[0, A_F^T], [A_F, M]]
            let dim = nf + m;
            let mut kmat = DMatrix::zeros(dim, dim);
            let mut g = DVector::zeros(m);
            let mut chc = 0.0;
            for (k, s) in scalings.iter().enumerate() {
                let range = self.block_range(k);
                let ak = self.a.columns(range.start, range.len());
                let ck = self.c.rows(range.start, range.len());
                let akh = &ak * &s.h;
                let mk = &akh * ak.transpose();
                {
                    let mut blk = kmat.view_mut((nf, nf), (m, m));
                    blk += &mk;
                }
                g += &akh * ck;
                chc += ck.dot(&(&s.h * ck));
            }
            if nf > 0 {
                let af = self.a.columns(0, nf);
                kmat.view_mut((nf, 0), (m, nf)).copy_from(&af);
                kmat.view_mut((0, nf), (nf, m)).copy_from(&af.transpose());
            }
            // diagonal regularization relative to each row's own scale
            let mut kreg = kmat.clone();
            for i in 0..dim {
                let d = if i < nf { 1e-14 * kmat.row(i).amax().max(1e-8) } else { 1e-14 * kmat[(i, i)].abs().max(1e-8) };
                kreg[(i, i)] += if i < nf { -d } else { d };
            }
            let lu = kreg.lu();
            let solve_k = |rhs: &DVector<f64>| -> Option<DVector<f64>> {
                let mut sol = lu.solve(rhs)?;
                let mut last = f64::INFINITY;
                for _ in 0..20 {
                    let res = rhs - &kmat * &sol;
                    let r = res.norm();
                    if r <= 1e-15 * rhs.norm().max(1e-300) || r > 0.5 * last {
                        break;
                    }
                    last = r;
                    sol += lu.solve(&res)?;
                }
                Some(sol)
            };

            let mut rhs1 = DVector::zeros(dim);
            rhs1.rows_mut(0, nf).copy_from(&self.c.rows(0, nf));
            rhs1.rows_mut(nf, m).copy_from(&(&self.b + &g));
            let Some(u1) = solve_k(&rhs1) else {
                break;
            };

            let mu = (it.x.rows(nf, self.layout.n - nf).dot(&it.z.rows(nf, self.layout.n - nf))
                + it.tau * it.kappa)
                / (nu + 1.0);

            let ctx = Ctx { rp: &rp, rd: &rd, rg, scalings: &scalings, u1: &u1, g: &g, chc };
            let lambda_sq: Vec<DMatrix<f64>> = scalings
                .iter()
                .map(|s| DMatrix::from_diagonal(&s.lambda.map(|l| -l * l)))
                .collect();
            let Some(aff) = self.direction(&it, &ctx, 1.0, &lambda_sq, -it.tau * it.kappa, &solve_k)
            else {
                break;
            };
            let alpha_aff = self.max_step(&it, &scalings, &aff).min(1.0);
            let sigma = (1.0 - alpha_aff).powi(3);

            let corr: Vec<DMatrix<f64>> = scalings
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let range = self.block_range(k);
                    let dx = smat(aff.x.as_slice(), range.start, self.layout.dims[k]);
                    let dz = smat(aff.z.as_slice(), range.start, self.layout.dims[k]);
                    let dxs = &s.rinv * dx * s.rinv.transpose();
                    let dzs = s.r.transpose() * dz * &s.r;
                    let mut d = &lambda_sq[k] - sym_product(&dxs, &dzs);
                    for i in 0..d.nrows() {
                        d[(i, i)] += sigma * mu;
                    }
                    d
                })
                .collect();
            let dtau_rhs = -it.tau * it.kappa + sigma * mu - aff.tau * aff.kappa;
            let Some(dir) = self.direction(&it, &ctx, 1.0 - sigma, &corr, dtau_rhs, &solve_k) else {
                break;
            };
            let alpha = (opts.step_fraction * self.max_step(&it, &scalings, &dir)).min(1.0);

            it.x += &dir.x * alpha;
            it.y += &dir.y * alpha;
            it.z += &dir.z * alpha;
            it.tau += alpha * dir.tau;
            it.kappa += alpha * dir.kappa;

            // rescale the homogeneous iterate to keep magnitudes moderate
            let size = it.tau + it.kappa;
            if !(1e-6..=1e6).contains(&size) {
                it.x /= size;
                it.y /= size;
                it.z /= size;
                it.tau /= size;
                it.kappa /= size;
            }

            if alpha < 1e-8 {
                stall += 1;
                if stall >= 5 {
                    break;
                }
            } else {
                stall = 0;
            }
        }

        match best {
            Some((merit, it)) if merit <= opts.reduced_tol => {
                self.finish(SolveStatus::NearOptimal, &it, opts.max_iterations)
            }
            Some((_, it)) => {
                let status = if stall >= 5 {
                    SolveStatus::NumericalFailure
                } else {
                    SolveStatus::MaxIterations
                };
                self.finish(status, &it, opts.max_iterations)
            }
            None => self.finish(SolveStatus::NumericalFailure, &self.initial(), 0),
        }
    }

    fn scalings(&self, it: &Iterate) -> Option<Vec<BlockScaling>> {
        let mut out = Vec::with_capacity(self.layout.dims.len());
        for k in 0..self.layout.dims.len() {
            let x = self.layout.unpack(&it.x, k);
            let z = self.layout.unpack(&it.z, k);
            let lx = x.cholesky()?.l();
            let lz = z.cholesky()?.l();
            let svd = (lz.transpose() * &lx).svd(true, true);
            let v = svd.v_t?.transpose();
            let sig = svd.singular_values;
            if sig.iter().any(|&s| !(s > 0.0)) {
                return None;
            }
            let r = &lx * &v * DMatrix::from_diagonal(&sig.map(|s| 1.0 / s.sqrt()));
            let rinv = r.clone().try_inverse()?;
            let w = &r * r.transpose();
            let h = scaling_operator(&w);
            out.push(BlockScaling { lx, lz, r, rinv, lambda: sig, h });
        }
        Some(out)
    }

    fn max_step(&self, it: &Iterate, sc: &[BlockScaling], d: &Direction) -> f64 {
        let mut a = max_step_scalar(it.tau, d.tau).min(max_step_scalar(it.kappa, d.kappa));
        for (k, s) in sc.iter().enumerate() {
            let dx = self.layout.unpack(&d.x, k);
            let dz = self.layout.unpack(&d.z, k);
            a = a.min(max_step_psd(&s.lx, &dx)).min(max_step_psd(&s.lz, &dz));
        }
        a
    }

    /// Newton direction reducing residuals by `eta`, with scaled
    /// complementarity right-hand sides `comp` and `tau_rhs`.
    fn direction(
        &self,
        it: &Iterate,
        ctx: &Ctx,
        eta: f64,
        comp: &[DMatrix<f64>],
        tau_rhs: f64,
        solve_k: &dyn Fn(&DVector<f64>) -> Option<DVector<f64>>,
    ) -> Option<Direction> {
        let nf = self.layout.nfree;
        let m = self.a.nrows();
        let n = self.layout.n;
        let r1 = ctx.rp * (-eta);
        let r2 = ctx.rd * (-eta);
        let r3 = -eta * ctx.rg;

        // ds = R S R^T with lambda ∘ S = comp
        let mut ds = DVector::zeros(n);
        let mut hr2 = DVector::zeros(n);
        let mut hc = DVector::zeros(n);
        for (k, s) in ctx.scalings.iter().enumerate() {
            let d = &comp[k];
            let dim = d.nrows();
            let smat_ = DMatrix::from_fn(dim, dim, |i, j| 2.0 * d[(i, j)] / (s.lambda[i] + s.lambda[j]));
            let dsk = &s.r * smat_ * s.r.transpose();
            let range = self.block_range(k);
            svec_into(&dsk, &mut ds.as_mut_slice()[range.clone()]);
            let r2k = r2.rows(range.start, range.len());
            hr2.rows_mut(range.start, range.len()).copy_from(&(&s.h * r2k));
            let ck = self.c.rows(range.start, range.len());
            hc.rows_mut(range.start, range.len()).copy_from(&(&s.h * ck));
        }
        let ab = self.a.columns(nf, n - nf);
        let t = ds.rows(nf, n - nf) - hr2.rows(nf, n - nf);
        let mut rhs0 = DVector::zeros(nf + m);
        rhs0.rows_mut(0, nf).copy_from(&r2.rows(0, nf));
        rhs0.rows_mut(nf, m).copy_from(&(&r1 - &ab * &t));
        let u0 = solve_k(&rhs0)?;

        let cf = self.c.rows(0, nf);
        let cb = self.c.rows(nf, n - nf);
        let gb = ctx.g - &self.b;
        let p0 = u0.rows(0, nf);
        let q0 = u0.rows(nf, m);
        let p1 = ctx.u1.rows(0, nf);
        let q1 = ctx.u1.rows(nf, m);
        let konst = cf.dot(&p0) + cb.dot(&t) + gb.dot(&q0) + tau_rhs / it.tau;
        let coef = cf.dot(&p1) + gb.dot(&q1) - ctx.chc - it.kappa / it.tau;
        if coef == 0.0 || !coef.is_finite() {
            return None;
        }
        let dtau = (r3 - konst) / coef;
        let u = &u0 + ctx.u1 * dtau;
        let dy = u.rows(nf, m).into_owned();
        let mut dz = &r2 - &self.a.transpose() * &dy + &self.c * dtau;
        dz.rows_mut(0, nf).fill(0.0);
        let mut dx = DVector::zeros(n);
        dx.rows_mut(0, nf).copy_from(&u.rows(0, nf));
        for (k, s) in ctx.scalings.iter().enumerate() {
            let range = self.block_range(k);
            let hdz = &s.h * dz.rows(range.start, range.len());
            let v = ds.rows(range.start, range.len()) - hdz;
            dx.rows_mut(range.start, range.len()).copy_from(&v);
        }
        let dkappa = (tau_rhs - it.kappa * dtau) / it.tau;
        let dir = Direction { x: dx, y: dy, z: dz, tau: dtau, kappa: dkappa };
        if dir.x.iter().chain(dir.y.iter()).chain(dir.z.iter()).all(|v| v.is_finite())
            && dir.tau.is_finite()
            && dir.kappa.is_finite()
        {
            Some(dir)
        } else {
            None
        }
    }

    fn finish(&self, status: SolveStatus, it: &Iterate, iterations: usize) -> SdpSolution {
        let nf = self.layout.nfree;
        let sign = if self.problem.sense == Sense::Maximize { -1.0 } else { 1.0 };
        let (x, y, z) = match status {
            SolveStatus::Infeasible | SolveStatus::Unbounded => (it.x.clone(), it.y.clone(), it.z.clone()),
            _ => (&it.x / it.tau, &it.y / it.tau, &it.z / it.tau),
        };
        // undo row equilibration on the multipliers
        let y_orig = y.component_mul(&self.row_scale);
        let blocks: Vec<DMatrix<f64>> =
            (0..self.layout.dims.len()).map(|k| self.layout.unpack(&x, k)).collect();
        let dual_blocks: Vec<DMatrix<f64>> =
            (0..self.layout.dims.len()).map(|k| self.layout.unpack(&z, k)).collect();
        let free: Vec<f64> = x.rows(0, nf).iter().copied().collect();

        // residuals against the unscaled data
        let (pres, dres, gap, pobj, dobj) = {
            let mut pmax: f64 = 0.0;
            let mut bnorm: f64 = 0.0;
            for (r, row) in self.problem.rows.iter().enumerate() {
                let lhs: f64 = row.terms.iter().map(|&(v, c)| c * value_of(&blocks, &free, v)).sum();
                let res = if matches!(status, SolveStatus::Unbounded) { lhs } else { lhs - row.rhs };
                pmax = pmax.hypot(res);
                bnorm = bnorm.hypot(row.rhs);
                let _ = r;
            }
            let cx = self.c.dot(&x);
            let by = self.b.dot(&y);
            let rd = self.a.transpose() * &y + &z
                - if matches!(status, SolveStatus::Infeasible | SolveStatus::Unbounded) {
                    DVector::zeros(self.layout.n)
                } else {
                    self.c.clone()
                };
            let pres = pmax / (1.0 + bnorm);
            let dres = rd.norm() / (1.0 + self.c.norm());
            let gap = (cx - by).abs() / (1.0 + cx.abs() + by.abs());
            (pres, dres, gap, sign * cx, sign * by)
        };
        let certificate = match status {
            SolveStatus::Infeasible => {
                let s = self.b.dot(&y);
                Some(Certificate::PrimalInfeasible { y: y_orig.iter().map(|v| v / s).collect() })
            }
            SolveStatus::Unbounded => {
                let s = -self.c.dot(&x);
                Some(Certificate::DualInfeasible {
                    blocks: blocks.iter().map(|b| b / s).collect(),
                    free: free.iter().map(|v| v / s).collect(),
                })
            }
            _ => None,
        };
        let (objective, dual_objective) = match status {
            SolveStatus::Infeasible => (sign * f64::INFINITY, sign * f64::INFINITY),
            SolveStatus::Unbounded => (-sign * f64::INFINITY, -sign * f64::INFINITY),
            _ => (pobj, dobj),
        };
        SdpSolution {
            status,
            blocks,
            free,
            y: y_orig.iter().copied().collect(),
            dual_blocks,
            objective,
            dual_objective,
            iterations,
            residuals: Residuals { primal: pres, dual: dres, gap },
            certificate,
        }
    }
}

struct Ctx<'c> {
    rp: &'c DVector<f64>,
    rd: &'c DVector<f64>,
    rg: f64,
    scalings: &'c [BlockScaling],
    u1: &'c DVector<f64>,
    g: &'c DVector<f64>,
    chc: f64,
}

fn clone_iterate(it: &Iterate) -> Iterate {
    Iterate { x: it.x.clone(), y: it.y.clone(), z: it.z.clone(), tau: it.tau, kappa: it.kappa }
}

fn value_of(blocks: &[DMatrix<f64>], free: &[f64], v: Var) -> f64 {
    match v {
        Var::Free(k) => free[k],
        Var::Entry { block, i, j } => blocks[block][(i, j)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn e(block: usize, i: usize, j: usize) -> Var {
        Var::Entry { block, i, j }
    }

    #[test]
    fn min_trace_with_fixed_corner() {
        let mut p = SdpProblem::new(Sense::Minimize);
        let b = p.add_block(2);
        p.add_row(vec![(e(b, 0, 0), 1.0)], 1.0);
        p.set_objective(vec![(e(b, 0, 0), 1.0), (e(b, 1, 1), 1.0)]);
        let s = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(s.objective, 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(s.blocks[0][(0, 0)], 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(s.blocks[0][(1, 1)], 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(s.blocks[0][(0, 1)], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn maximize_with_free_variable() {
        // max t  s.t.  [[1, t], [t, 1]] ⪰ 0  → t = 1
        let mut p = SdpProblem::new(Sense::Maximize);
        let b = p.add_block(2);
        let t = p.add_free(1);
        p.add_row(vec![(e(b, 0, 0), 1.0)], 1.0);
        p.add_row(vec![(e(b, 1, 1), 1.0)], 1.0);
        p.add_row(vec![(e(b, 0, 1), 1.0), (Var::Free(t), -1.0)], 0.0);
        p.set_objective(vec![(Var::Free(t), 1.0)]);
        let s = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(s.objective, 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(s.free[0], 1.0, epsilon = 1e-7);
    }

    #[test]
    fn detects_infeasibility() {
        // X11 = -1 with X ⪰ 0
        let mut p = SdpProblem::new(Sense::Minimize);
        let b = p.add_block(2);
        p.add_row(vec![(e(b, 0, 0), 1.0)], -1.0);
        let s = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Infeasible);
        let Some(Certificate::PrimalInfeasible { y }) = s.certificate else {
            panic!("missing certificate");
        };
        // b^T y > 0 and A^T y ⪯ 0
        assert!(-y[0] > 0.0);
        assert!(y[0] <= 1e-8);
    }

    #[test]
    fn detects_unboundedness() {
        // max X12 s.t. X11 = 1 (X22 unconstrained) → unbounded
        let mut p = SdpProblem::new(Sense::Maximize);
        let b = p.add_block(2);
        p.add_row(vec![(e(b, 0, 0), 1.0)], 1.0);
        p.set_objective(vec![(e(b, 0, 1), 1.0)]);
        let s = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Unbounded);
        assert!(matches!(s.certificate, Some(Certificate::DualInfeasible { .. })));
    }

    #[test]
    fn one_variable_sublevel_bracket() {
        // Is c - 2 x^2 - (c - x^2)... simpler: find Q ⪰ 0 on [1, x] with
        // Q = [[c, 0], [0, 1]]: feasible iff c >= 0.
        for (c, feasible) in [(0.5, true), (-0.5, false)] {
            let mut p = SdpProblem::new(Sense::Minimize);
            let b = p.add_block(2);
            p.add_row(vec![(e(b, 0, 0), 1.0)], c);
            p.add_row(vec![(e(b, 0, 1), 1.0)], 0.0);
            p.add_row(vec![(e(b, 1, 1), 1.0)], 1.0);
            let s = solve(&p, &SolverOptions::default()).unwrap();
            // oracle: eigenvalues of diag(c, 1)
            let oracle = c.min(1.0) >= 0.0;
            assert_eq!(oracle, feasible);
            assert_eq!(s.status == SolveStatus::Optimal, feasible, "c = {c}: {:?}", s.status);
            assert_eq!(s.status == SolveStatus::Infeasible, !feasible);
        }
    }

    #[test]
    fn multiple_blocks() {
        // min X + Y (1x1 blocks) with X - Y = 3 → X = 3, Y = 0
        let mut p = SdpProblem::new(Sense::Minimize);
        let x = p.add_block(1);
        let y = p.add_block(1);
        p.add_row(vec![(e(x, 0, 0), 1.0), (e(y, 0, 0), -1.0)], 3.0);
        p.set_objective(vec![(e(x, 0, 0), 1.0), (e(y, 0, 0), 1.0)]);
        let s = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(s.objective, 3.0, epsilon = 1e-7);
    }

    #[test]
    fn dump_round_trip() {
        let mut p = SdpProblem::new(Sense::Maximize);
        let b = p.add_block(3);
        p.add_free(2);
        p.add_row(vec![(e(b, 0, 2), 1.5), (Var::Free(1), -2.0)], 0.25);
        p.add_row(vec![(e(b, 1, 1), 1.0)], 0.0);
        p.set_objective(vec![(e(b, 0, 0), 1.0), (Var::Free(0), 3.0)]);
        let text = p.to_dump();
        let q = SdpProblem::from_dump(&text).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn dump_errors() {
        assert!(SdpProblem::from_dump("a 0 f 0 1.0").is_err());
        assert!(SdpProblem::from_dump("free 1\nrows 1\na 0 f 3 1.0").is_err());
        assert!(SdpProblem::from_dump("block 2\nrows 1\na 0 b 0 1 0 1.0").is_err());
        assert!(SdpProblem::from_dump("bogus").is_err());
        let ok = SdpProblem::from_dump("# comment\nsense min\nblock 1\nrows 1\nrhs 0 2 # two\na 0 b 0 0 0 1\n").unwrap();
        assert_eq!(ok.rows[0].rhs, 2.0);
    }

    #[test]
    fn rejects_bad_input() {
        let mut p = SdpProblem::new(Sense::Minimize);
        p.add_block(2);
        p.add_row(vec![(e(0, 1, 0), 1.0)], 1.0);
        assert!(matches!(solve(&p, &SolverOptions::default()), Err(SdpError::InvalidRow { .. })));
        let opts = SolverOptions { gap_tol: 0.0, ..SolverOptions::default() };
        assert!(solve(&SdpProblem::new(Sense::Minimize), &opts).is_err());
    }

    #[test]
    fn svec_round_trip() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        let mut v = vec![0.0; 6];
        svec_into(&m, &mut v);
        assert_eq!(smat(&v, 0, 3), m);
        // inner product preserved
        let tr: f64 = (&m * &m).trace();
        let dot: f64 = v.iter().map(|a| a * a).sum();
        assert_abs_diff_eq!(tr, dot, epsilon = 1e-12);
    }

    #[test]
    fn scaling_operator_matches_congruence() {
        let w = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0]);
        let v = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.5, -1.0, 2.0, 0.7, 0.5, 0.7, -3.0]);
        let mut sv = vec![0.0; 6];
        svec_into(&v, &mut sv);
        let got = scaling_operator(&w) * DVector::from_vec(sv);
        let mut want = vec![0.0; 6];
        svec_into(&(&w * &v * &w), &mut want);
        for (a, b) in got.iter().zip(&want) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}
