//! Sum-of-squares programs compiled to block SDPs by coefficient matching.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::polynomial::{Monomial, Polynomial};
use crate::sdp::{SdpError, SdpProblem, SdpSolution, SdpSolver, Sense, SolveStatus, Var};
use crate::smr::{canonical_pair, CoefficientMap, GramForm, MonomialBasis, SmrError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SosError {
    #[error("constraint '{constraint}' multiplies decisions '{first}' and '{second}'")]
    Bilinear { constraint: String, first: String, second: String },
    #[error("program has no constraints")]
    Empty,
    #[error("expression has {got} variables, program has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("solution not usable: {0:?}")]
    Unusable(SolveStatus),
    #[error("'{0}' is not a free polynomial decision")]
    NotFree(String),
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error(transparent)]
    Smr(#[from] SmrError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PolyHandle(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScalarHandle(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConstraintId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Poly(PolyHandle),
    Scalar(ScalarHandle),
}

#[derive(Debug, Clone)]
enum PolyKind {
    Free(Vec<Monomial>),
    Sos(MonomialBasis),
}

#[derive(Debug, Clone)]
struct PolyDecision {
    name: String,
    kind: PolyKind,
}

#[derive(Debug, Clone)]
struct ScalarDecision {
    name: String,
    nonneg: bool,
}

#[derive(Debug, Clone)]
enum Term {
    Known(Polynomial),
    Poly(PolyHandle, Polynomial),
    Scalar(ScalarHandle, Polynomial),
    /// `grad h . field`
    Lie(PolyHandle, Vec<Polynomial>),
    Product(Decision, Decision),
}

/// Affine combination of known polynomials and decisions, each decision
/// multiplied by a known polynomial.
#[derive(Debug, Clone)]
pub struct Expr {
    nvars: usize,
    terms: Vec<Term>,
}

impl Expr {
    pub fn new(nvars: usize) -> Self {
        Self { nvars, terms: Vec::new() }
    }

    pub fn known(p: Polynomial) -> Self {
        Self { nvars: p.nvars(), terms: vec![Term::Known(p)] }
    }

    pub fn plus(mut self, p: Polynomial) -> Self {
        self.terms.push(Term::Known(p));
        self
    }

    /// Adds `h(x) * factor(x)`.
    pub fn plus_poly(mut self, h: PolyHandle, factor: Polynomial) -> Self {
        self.terms.push(Term::Poly(h, factor));
        self
    }

    /// Adds `s * factor(x)`.
    pub fn plus_scalar(mut self, s: ScalarHandle, factor: Polynomial) -> Self {
        self.terms.push(Term::Scalar(s, factor));
        self
    }

    /// Adds the derivative of `h` along a known vector field.
    pub fn plus_lie(mut self, h: PolyHandle, field: Vec<Polynomial>) -> Self {
        self.terms.push(Term::Lie(h, field));
        self
    }

    /// Adds a product of two decisions. Such expressions are rejected at
    /// compile time.
    pub fn plus_product(mut self, a: Decision, b: Decision) -> Self {
        self.terms.push(Term::Product(a, b));
        self
    }

    fn check(&self, nvars: usize) -> Result<(), SosError> {
        let bad = self.terms.iter().find_map(|t| match t {
            Term::Known(p) | Term::Poly(_, p) | Term::Scalar(_, p) if p.nvars() != nvars => Some(p.nvars()),
            Term::Lie(_, field) if field.len() != nvars => Some(field.len()),
            Term::Lie(_, field) => field.iter().find(|p| p.nvars() != nvars).map(Polynomial::nvars),
            _ => None,
        });
        match bad.or((self.nvars != nvars).then_some(self.nvars)) {
            Some(got) => Err(SosError::DimensionMismatch { expected: nvars, got }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
enum LinTerm {
    Coeff(PolyHandle, Monomial, f64),
    Scalar(ScalarHandle, f64),
    GramTrace(PolyHandle, f64),
}

/// Linear functional on decision coefficients.
#[derive(Debug, Clone, Default)]
pub struct Linear {
    terms: Vec<LinTerm>,
    constant: f64,
}

impl Linear {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    /// `w` times the coefficient of `m` in `h`.
    pub fn coefficient(mut self, h: PolyHandle, m: Monomial, w: f64) -> Self {
        self.terms.push(LinTerm::Coeff(h, m, w));
        self
    }

    pub fn scalar(mut self, s: ScalarHandle, w: f64) -> Self {
        self.terms.push(LinTerm::Scalar(s, w));
        self
    }

    /// Trace of the Gram matrix of an SOS decision.
    pub fn gram_trace(mut self, h: PolyHandle, w: f64) -> Self {
        self.terms.push(LinTerm::GramTrace(h, w));
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Eq,
    Ge,
    Le,
}

#[derive(Debug, Clone)]
enum Constraint {
    Sos(Expr),
    Zero(Expr),
    Linear(Linear, Cmp, f64),
    /// `M I - Q(h) ⪰ 0` with `Q(h)` the canonical Gram matrix of free `h`.
    GramBound(PolyHandle, MonomialBasis, f64),
}

#[derive(Debug, Clone)]
pub struct SosProgram {
    nvars: usize,
    polys: Vec<PolyDecision>,
    scalars: Vec<ScalarDecision>,
    constraints: Vec<(String, Constraint)>,
    objective: Option<(Sense, Linear)>,
}

/// Location of each decision and constraint inside the compiled SDP.
#[derive(Debug, Clone)]
pub struct Compiled {
    pub sdp: SdpProblem,
    poly_vars: Vec<PolyVars>,
    scalar_vars: Vec<Var>,
    constraint_blocks: Vec<Option<(usize, MonomialBasis)>>,
    objective_constant: f64,
    /// Set when coefficient matching produced `0 = c` with `c != 0`.
    pub trivially_infeasible: bool,
}

#[derive(Debug, Clone)]
enum PolyVars {
    Free(BTreeMap<Monomial, Var>),
    Sos(usize, MonomialBasis),
}

type Affine = (Vec<(Var, f64)>, f64);

impl SosProgram {
    pub fn new(nvars: usize) -> Self {
        Self { nvars, polys: Vec::new(), scalars: Vec::new(), constraints: Vec::new(), objective: None }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    /// Free polynomial with the given monomial support.
    pub fn free_poly(&mut self, name: &str, support: Vec<Monomial>) -> PolyHandle {
        let mut support = support;
        support.sort();
        support.dedup();
        self.polys.push(PolyDecision { name: name.into(), kind: PolyKind::Free(support) });
        PolyHandle(self.polys.len() - 1)
    }

    /// SOS polynomial `Z^T Q Z` with `Q ⪰ 0` over `basis`.
    pub fn sos_poly(&mut self, name: &str, basis: MonomialBasis) -> PolyHandle {
        self.polys.push(PolyDecision { name: name.into(), kind: PolyKind::Sos(basis) });
        PolyHandle(self.polys.len() - 1)
    }

    pub fn scalar(&mut self, name: &str, nonneg: bool) -> ScalarHandle {
        self.scalars.push(ScalarDecision { name: name.into(), nonneg });
        ScalarHandle(self.scalars.len() - 1)
    }

    pub fn require_sos(&mut self, label: &str, e: Expr) -> ConstraintId {
        self.push(label, Constraint::Sos(e))
    }

    pub fn require_zero(&mut self, label: &str, e: Expr) -> ConstraintId {
        self.push(label, Constraint::Zero(e))
    }

    pub fn require_linear(&mut self, label: &str, l: Linear, cmp: Cmp, rhs: f64) -> ConstraintId {
        self.push(label, Constraint::Linear(l, cmp, rhs))
    }

    /// `|coefficient| <= bound` for every coefficient of free polynomial `h`.
    pub fn bound_coefficients(&mut self, h: PolyHandle, bound: f64) -> Result<(), SosError> {
        let PolyKind::Free(support) = &self.polys[h.0].kind else {
            return Err(SosError::NotFree(self.polys[h.0].name.clone()));
        };
        let name = self.polys[h.0].name.clone();
        for m in support.clone() {
            let l = Linear::new().coefficient(h, m, 1.0);
            self.require_linear(&format!("{name} upper bound"), l.clone(), Cmp::Le, bound);
            self.require_linear(&format!("{name} lower bound"), l, Cmp::Ge, -bound);
        }
        Ok(())
    }

    /// Canonical Gram matrix of free `h` over `basis` bounded above by `bound * I`.
    pub fn bound_gram(&mut self, h: PolyHandle, basis: MonomialBasis, bound: f64) -> Result<ConstraintId, SosError> {
        if !matches!(self.polys[h.0].kind, PolyKind::Free(_)) {
            return Err(SosError::NotFree(self.polys[h.0].name.clone()));
        }
        let label = format!("{} gram bound", self.polys[h.0].name);
        Ok(self.push(&label, Constraint::GramBound(h, basis, bound)))
    }

    /// Sum of coefficients of `h` on the squares of `basis` elements: the
    /// trace of the canonical Gram matrix of a free polynomial.
    pub fn canonical_trace(&self, h: PolyHandle, basis: &MonomialBasis) -> Linear {
        basis
            .entries()
            .iter()
            .fold(Linear::new(), |l, b| l.coefficient(h, b.mul(b), 1.0))
    }

    /// `h(x)` as a linear functional of its coefficients.
    pub fn evaluation(&self, h: PolyHandle, x: &[f64]) -> Linear {
        let monos = match &self.polys[h.0].kind {
            PolyKind::Free(s) => s.clone(),
            PolyKind::Sos(b) => CoefficientMap::new(b).monomials().cloned().collect(),
        };
        monos.into_iter().fold(Linear::new(), |l, m| {
            let w = m.eval(x);
            l.coefficient(h, m, w)
        })
    }

    pub fn maximize(&mut self, l: Linear) {
        self.objective = Some((Sense::Maximize, l));
    }

    pub fn minimize(&mut self, l: Linear) {
        self.objective = Some((Sense::Minimize, l));
    }

    fn push(&mut self, label: &str, c: Constraint) -> ConstraintId {
        self.constraints.push((label.into(), c));
        ConstraintId(self.constraints.len() - 1)
    }

    fn decision_name(&self, d: Decision) -> String {
        match d {
            Decision::Poly(h) => self.polys[h.0].name.clone(),
            Decision::Scalar(s) => self.scalars[s.0].name.clone(),
        }
    }

    pub fn compile(&self) -> Result<Compiled, SosError> {
        if self.constraints.is_empty() {
            return Err(SosError::Empty);
        }
        for (label, c) in &self.constraints {
            if let Constraint::Sos(e) | Constraint::Zero(e) = c {
                e.check(self.nvars)?;
                if let Some(Term::Product(a, b)) = e.terms.iter().find(|t| matches!(t, Term::Product(..))) {
                    return Err(SosError::Bilinear {
                        constraint: label.clone(),
                        first: self.decision_name(*a),
                        second: self.decision_name(*b),
                    });
                }
            }
        }

        let mut sdp = SdpProblem::new(Sense::Minimize);
        let poly_vars: Vec<PolyVars> = self
            .polys
            .iter()
            .map(|d| match &d.kind {
                PolyKind::Free(support) => {
                    let first = sdp.add_free(support.len());
                    PolyVars::Free(
                        support.iter().enumerate().map(|(k, m)| (m.clone(), Var::Free(first + k))).collect(),
                    )
                }
                PolyKind::Sos(basis) => PolyVars::Sos(sdp.add_block(basis.len()), basis.clone()),
            })
            .collect();
        let scalar_vars: Vec<Var> = self
            .scalars
            .iter()
            .map(|s| {
                if s.nonneg {
                    Var::Entry { block: sdp.add_block(1), i: 0, j: 0 }
                } else {
                    Var::Free(sdp.add_free(1))
                }
            })
            .collect();
        let mut compiled = Compiled {
            sdp,
            poly_vars,
            scalar_vars,
            constraint_blocks: vec![None; self.constraints.len()],
            objective_constant: 0.0,
            trivially_infeasible: false,
        };

        for (k, (_, c)) in self.constraints.iter().enumerate() {
            match c {
                Constraint::Sos(e) => {
                    let coeffs = self.expand(&compiled, e);
                    let basis = gram_basis(self.nvars, &coeffs);
                    let block = compiled.sdp.add_block(basis.len());
                    let map = CoefficientMap::new(&basis);
                    let mut monos: Vec<Monomial> = coeffs.keys().cloned().collect();
                    monos.extend(map.monomials().cloned());
                    monos.sort();
                    monos.dedup();
                    // Gram aggregate - expression = 0
                    for m in monos {
                        let (terms, konst) = coeffs.get(&m).cloned().unwrap_or_default();
                        let mut row: Vec<(Var, f64)> = terms.into_iter().map(|(v, w)| (v, -w)).collect();
                        row.extend(map.contributions(&m).iter().map(|&(i, j, w)| (Var::Entry { block, i, j }, w)));
                        compiled.push_row(row, konst);
                    }
                    compiled.constraint_blocks[k] = Some((block, basis));
                }
                Constraint::Zero(e) => {
                    for (_, (terms, konst)) in self.expand(&compiled, e) {
                        compiled.push_row(terms, -konst);
                    }
                }
                Constraint::Linear(l, cmp, rhs) => {
                    let (mut terms, konst) = self.linear_terms(&compiled, l);
                    match cmp {
                        Cmp::Eq => {}
                        Cmp::Ge | Cmp::Le => {
                            let block = compiled.sdp.add_block(1);
                            let w = if *cmp == Cmp::Ge { -1.0 } else { 1.0 };
                            terms.push((Var::Entry { block, i: 0, j: 0 }, w));
                        }
                    }
                    compiled.push_row(terms, rhs - konst);
                }
                Constraint::GramBound(h, basis, bound) => {
                    let block = compiled.sdp.add_block(basis.len());
                    let map = CoefficientMap::new(basis);
                    let PolyVars::Free(vars) = &compiled.poly_vars[h.0] else { unreachable!() };
                    let mut entries: BTreeMap<(usize, usize), Vec<(Var, f64)>> = BTreeMap::new();
                    for (m, &v) in vars {
                        let (i, j, w) = canonical_pair(&map, basis, m)
                            .ok_or_else(|| SmrError::NotRepresentable(m.exponents().to_vec()))?;
                        entries.entry((i, j)).or_default().push((v, 1.0 / w));
                    }
                    let n = basis.len();
                    for i in 0..n {
                        for j in i..n {
                            let mut terms = vec![(Var::Entry { block, i, j }, 1.0)];
                            terms.extend(entries.remove(&(i, j)).unwrap_or_default());
                            compiled.push_row(terms, if i == j { *bound } else { 0.0 });
                        }
                    }
                    compiled.constraint_blocks[k] = Some((block, basis.clone()));
                }
            }
        }

        if let Some((sense, l)) = &self.objective {
            let (terms, konst) = self.linear_terms(&compiled, l);
            compiled.sdp.sense = *sense;
            compiled.sdp.set_objective(merge(terms));
            compiled.objective_constant = konst;
        }
        Ok(compiled)
    }

    /// Coefficient of each monomial of an expression as an affine function
    /// of SDP variables.
    fn expand(&self, c: &Compiled, e: &Expr) -> BTreeMap<Monomial, Affine> {
        let mut out: BTreeMap<Monomial, Affine> = BTreeMap::new();
        for t in &e.terms {
            match t {
                Term::Known(p) => {
                    for (m, v) in p.terms() {
                        out.entry(m.clone()).or_default().1 += v;
                    }
                }
                Term::Poly(h, factor) => {
                    for (mh, vars) in c.poly_coefficients(*h) {
                        for (mf, cf) in factor.terms() {
                            let entry = out.entry(mh.mul(mf)).or_default();
                            entry.0.extend(vars.iter().map(|&(v, w)| (v, w * cf)));
                        }
                    }
                }
                Term::Scalar(s, factor) => {
                    let v = c.scalar_vars[s.0];
                    for (mf, cf) in factor.terms() {
                        out.entry(mf.clone()).or_default().0.push((v, cf));
                    }
                }
                Term::Lie(h, field) => {
                    for (mh, vars) in c.poly_coefficients(*h) {
                        let dm = Polynomial::monomial(mh, 1.0)
                            .lie_derivative_along(field)
                            .expect("dimensions checked before expansion");
                        for (mf, cf) in dm.terms() {
                            let entry = out.entry(mf.clone()).or_default();
                            entry.0.extend(vars.iter().map(|&(v, w)| (v, w * cf)));
                        }
                    }
                }
                Term::Product(..) => unreachable!("rejected before expansion"),
            }
        }
        for entry in out.values_mut() {
            entry.0 = merge(std::mem::take(&mut entry.0));
        }
        out
    }

    fn linear_terms(&self, c: &Compiled, l: &Linear) -> Affine {
        let mut terms = Vec::new();
        for t in &l.terms {
            match t {
                LinTerm::Coeff(h, m, w) => {
                    if let Some(vars) = c.poly_coefficients(*h).remove(m) {
                        terms.extend(vars.into_iter().map(|(v, x)| (v, x * w)));
                    }
                }
                LinTerm::Scalar(s, w) => terms.push((c.scalar_vars[s.0], *w)),
                LinTerm::GramTrace(h, w) => match &c.poly_vars[h.0] {
                    PolyVars::Sos(block, basis) => {
                        terms.extend((0..basis.len()).map(|i| (Var::Entry { block: *block, i, j: i }, *w)))
                    }
                    PolyVars::Free(_) => {}
                },
            }
        }
        (merge(terms), l.constant)
    }

    /// Compile and solve. Returns the solver status and, when usable, the
    /// recovered decisions.
    pub fn solve(&self, solver: &dyn SdpSolver) -> Result<(SolveStatus, Option<SosSolution>), SosError> {
        let compiled = self.compile()?;
        if compiled.trivially_infeasible {
            return Ok((SolveStatus::Infeasible, None));
        }
        let sol = solver.solve(&compiled.sdp)?;
        if sol.status.is_usable() {
            let rec = self.recover(&compiled, &sol)?;
            Ok((sol.status, Some(rec)))
        } else {
            Ok((sol.status, None))
        }
    }

    pub fn recover(&self, c: &Compiled, s: &SdpSolution) -> Result<SosSolution, SosError> {
        if !s.status.is_usable() {
            return Err(SosError::Unusable(s.status));
        }
        let mut polys = Vec::with_capacity(self.polys.len());
        let mut grams = Vec::with_capacity(self.polys.len());
        for pv in &c.poly_vars {
            match pv {
                PolyVars::Free(vars) => {
                    polys.push(Polynomial::from_terms(
                        self.nvars,
                        vars.iter().map(|(m, &v)| (m.clone(), s.value(v))),
                    ));
                    grams.push(None);
                }
                PolyVars::Sos(block, basis) => {
                    let g = GramForm::from_matrix(basis.clone(), &s.blocks[*block])?;
                    polys.push(g.expand());
                    grams.push(Some(g));
                }
            }
        }
        let scalars = c.scalar_vars.iter().map(|&v| s.value(v)).collect();
        let constraint_grams = c
            .constraint_blocks
            .iter()
            .map(|cb| {
                cb.as_ref()
                    .map(|(block, basis)| GramForm::from_matrix(basis.clone(), &s.blocks[*block]))
                    .transpose()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SosSolution {
            status: s.status,
            objective: s.objective + c.objective_constant,
            polys,
            grams,
            scalars,
            constraint_grams,
        })
    }
}

impl Compiled {
    fn push_row(&mut self, terms: Vec<(Var, f64)>, rhs: f64) {
        let terms: Vec<_> = merge(terms).into_iter().filter(|&(_, w)| w != 0.0).collect();
        if terms.is_empty() {
            if rhs.abs() > 1e-12 {
                self.trivially_infeasible = true;
                self.sdp.add_row(terms, rhs);
            }
            return;
        }
        self.sdp.add_row(terms, rhs);
    }

    fn poly_coefficients(&self, h: PolyHandle) -> BTreeMap<Monomial, Vec<(Var, f64)>> {
        match &self.poly_vars[h.0] {
            PolyVars::Free(vars) => vars.iter().map(|(m, &v)| (m.clone(), vec![(v, 1.0)])).collect(),
            PolyVars::Sos(block, basis) => CoefficientMap::new(basis)
                .iter()
                .map(|(m, pairs)| {
                    (m.clone(), pairs.iter().map(|&(i, j, w)| (Var::Entry { block: *block, i, j }, w)).collect())
                })
                .collect(),
        }
    }
}

fn merge(terms: Vec<(Var, f64)>) -> Vec<(Var, f64)> {
    let mut acc: BTreeMap<Var, f64> = BTreeMap::new();
    for (v, w) in terms {
        *acc.entry(v).or_insert(0.0) += w;
    }
    acc.into_iter().collect()
}

/// Gram basis for an SOS constraint: degrees from half the lowest to half
/// the highest structurally present degree (rounded outward).
fn gram_basis(nvars: usize, coeffs: &BTreeMap<Monomial, Affine>) -> MonomialBasis {
    let degrees: Vec<u32> = coeffs
        .iter()
        .filter(|(_, (terms, k))| !terms.is_empty() || *k != 0.0)
        .map(|(m, _)| m.degree())
        .collect();
    let lo = degrees.iter().copied().min().unwrap_or(0) / 2;
    let hi = degrees.iter().copied().max().unwrap_or(0).div_ceil(2);
    MonomialBasis::with_degrees(nvars, lo, hi)
}

#[derive(Debug, Clone)]
pub struct SosSolution {
    pub status: SolveStatus,
    pub objective: f64,
    polys: Vec<Polynomial>,
    grams: Vec<Option<GramForm>>,
    scalars: Vec<f64>,
    constraint_grams: Vec<Option<GramForm>>,
}

impl SosSolution {
    pub fn poly(&self, h: PolyHandle) -> &Polynomial {
        &self.polys[h.0]
    }

    pub fn gram(&self, h: PolyHandle) -> Option<&GramForm> {
        self.grams[h.0].as_ref()
    }

    pub fn scalar(&self, s: ScalarHandle) -> f64 {
        self.scalars[s.0]
    }

    /// Gram matrix certifying an SOS (or Gram-bound) constraint.
    pub fn constraint_gram(&self, c: ConstraintId) -> Option<&GramForm> {
        self.constraint_grams[c.0].as_ref()
    }

    /// The expression with solved decisions substituted.
    pub fn evaluate(&self, e: &Expr) -> Polynomial {
        e.terms.iter().fold(Polynomial::zero(e.nvars), |acc, t| match t {
            Term::Known(p) => acc + p,
            Term::Poly(h, f) => acc + &self.polys[h.0] * f,
            Term::Scalar(s, f) => acc + f.scale(self.scalars[s.0]),
            Term::Lie(h, field) => {
                acc + self.polys[h.0].lie_derivative_along(field).expect("dimensions checked at compile")
            }
            Term::Product(..) => acc,
        })
    }
}
