//! Sparse multivariate polynomials with real coefficients.
//!
//! Terms are kept in a `BTreeMap` keyed by [`Monomial`], whose ordering is
//! graded-lexicographic: total degree first, then `x1 > x2 > ... > xn`.
//! Coefficients whose magnitude falls below [`DROP_TOLERANCE`] are removed
//! after every arithmetic operation, so two polynomials that print the same
//! compare equal.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coefficients smaller than this (in magnitude) are dropped.
pub const DROP_TOLERANCE: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolyError {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown variable `{name}` at position {pos}")]
    UnknownVariable { name: String, pos: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("variable index {index} out of range for {nvars} variables")]
    IndexOutOfRange { index: usize, nvars: usize },
    #[error("invalid variable set: {0}")]
    InvalidVariables(String),
}

/// Ordered, duplicate-free list of variable names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct VariableSet {
    names: Vec<String>,
}

impl VariableSet {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self, PolyError> {
        if names.is_empty() {
            return Err(PolyError::InvalidVariables("no variables declared".into()));
        }
        let mut out: Vec<String> = Vec::with_capacity(names.len());
        for name in names {
            let name = name.as_ref().trim();
            let valid = name.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
                && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
            if !valid {
                return Err(PolyError::InvalidVariables(format!("`{name}` is not an identifier")));
            }
            if out.iter().any(|n| n == name) {
                return Err(PolyError::InvalidVariables(format!("duplicate variable `{name}`")));
            }
            out.push(name.to_string());
        }
        Ok(Self { names: out })
    }

    /// `x1, ..., xn`.
    pub fn indexed(n: usize) -> Self {
        Self { names: (1..=n).map(|i| format!("x{i}")).collect() }
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for VariableSet {
    type Error = PolyError;
    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        VariableSet::new(&v)
    }
}

impl From<VariableSet> for Vec<String> {
    fn from(v: VariableSet) -> Self {
        v.names
    }
}

/// Exponent vector of a monomial.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Monomial(Vec<u32>);

impl Monomial {
    pub fn new(exponents: Vec<u32>) -> Self {
        Monomial(exponents)
    }

    pub fn one(n: usize) -> Self {
        Monomial(vec![0; n])
    }

    pub fn var(n: usize, i: usize) -> Self {
        let mut e = vec![0; n];
        e[i] = 1;
        Monomial(e)
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn nvars(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_constant(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.0.len(), other.0.len());
        Monomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// `Some(m)` with `m * m == self` when every exponent is even.
    pub fn sqrt(&self) -> Option<Monomial> {
        if self.0.iter().all(|e| e % 2 == 0) {
            Some(Monomial(self.0.iter().map(|e| e / 2).collect()))
        } else {
            None
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut v = 1.0;
        for (&e, &xi) in self.0.iter().zip(x) {
            if e > 0 {
                v *= xi.powi(e as i32);
            }
        }
        v
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Sparse polynomial in `nvars` variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Self { nvars, terms: BTreeMap::new() }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Self::zero(nvars);
        p.add_term(Monomial::one(nvars), c);
        p
    }

    pub fn var(nvars: usize, i: usize) -> Self {
        let mut p = Self::zero(nvars);
        p.add_term(Monomial::var(nvars, i), 1.0);
        p
    }

    pub fn monomial(m: Monomial, c: f64) -> Self {
        let mut p = Self::zero(m.nvars());
        p.add_term(m, c);
        p
    }

    pub fn from_terms<I: IntoIterator<Item = (Monomial, f64)>>(nvars: usize, terms: I) -> Self {
        let mut p = Self::zero(nvars);
        for (m, c) in terms {
            assert_eq!(m.nvars(), nvars, "monomial dimension mismatch");
            *p.terms.entry(m).or_insert(0.0) += c;
        }
        p.prune();
        p
    }

    pub fn parse(text: &str, vars: &VariableSet) -> Result<Self, PolyError> {
        Parser::new(text, vars).parse()
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Total degree; 0 for the zero polynomial.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    /// Smallest total degree over stored terms; 0 for the zero polynomial.
    pub fn min_degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).min().unwrap_or(0)
    }

    pub fn coefficient(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn constant_term(&self) -> f64 {
        self.coefficient(&Monomial::one(self.nvars))
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    fn add_term(&mut self, m: Monomial, c: f64) {
        let v = self.terms.entry(m.clone()).or_insert(0.0);
        *v += c;
        if v.abs() < DROP_TOLERANCE {
            self.terms.remove(&m);
        }
    }

    fn prune(&mut self) {
        self.terms.retain(|_, c| c.abs() >= DROP_TOLERANCE);
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        let mut p = Polynomial {
            nvars: self.nvars,
            terms: self.terms.iter().map(|(m, c)| (m.clone(), c * s)).collect(),
        };
        p.prune();
        p
    }

    pub fn pow(&self, k: u32) -> Polynomial {
        let mut out = Polynomial::constant(self.nvars, 1.0);
        for _ in 0..k {
            out = &out * self;
        }
        out
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64, PolyError> {
        if x.len() != self.nvars {
            return Err(PolyError::DimensionMismatch { expected: self.nvars, got: x.len() });
        }
        Ok(self.eval(x))
    }

    /// Unchecked evaluation; `x.len()` must equal `nvars`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(m, c)| c * m.eval(x)).sum()
    }

    pub fn differentiate(&self, var_index: usize) -> Result<Polynomial, PolyError> {
        if var_index >= self.nvars {
            return Err(PolyError::IndexOutOfRange { index: var_index, nvars: self.nvars });
        }
        let mut out = Polynomial::zero(self.nvars);
        for (m, &c) in &self.terms {
            let e = m.0[var_index];
            if e == 0 {
                continue;
            }
            let mut d = m.0.clone();
            d[var_index] -= 1;
            *out.terms.entry(Monomial(d)).or_insert(0.0) += c * e as f64;
        }
        out.prune();
        Ok(out)
    }

    pub fn gradient(&self) -> Vec<Polynomial> {
        (0..self.nvars)
            .map(|i| self.differentiate(i).expect("index in range"))
            .collect()
    }

    /// `sum_i (dp/dx_i) * f_i`.
    pub fn lie_derivative(&self, field: &PolyVectorField) -> Result<Polynomial, PolyError> {
        self.lie_derivative_along(&field.drift)
    }

    /// Lie derivative along an explicit list of components.
    pub fn lie_derivative_along(&self, components: &[Polynomial]) -> Result<Polynomial, PolyError> {
        if components.len() != self.nvars {
            return Err(PolyError::DimensionMismatch { expected: self.nvars, got: components.len() });
        }
        let mut out = Polynomial::zero(self.nvars);
        for (i, fi) in components.iter().enumerate() {
            if fi.nvars != self.nvars {
                return Err(PolyError::DimensionMismatch { expected: self.nvars, got: fi.nvars });
            }
            let d = self.differentiate(i)?;
            if !d.is_zero() {
                out = &out + &(&d * fi);
            }
        }
        Ok(out)
    }

    /// Largest coefficient magnitude.
    pub fn max_abs_coefficient(&self) -> f64 {
        self.terms.values().fold(0.0, |a, c| a.max(c.abs()))
    }

    pub fn display<'a>(&'a self, vars: &'a VariableSet) -> PolyDisplay<'a> {
        PolyDisplay { poly: self, vars }
    }

    /// Print with default names `x1..xn`.
    pub fn to_string_default(&self) -> String {
        let vars = VariableSet::indexed(self.nvars);
        self.display(&vars).to_string()
    }
}

fn check_dims(a: &Polynomial, b: &Polynomial) {
    assert_eq!(a.nvars, b.nvars, "polynomials over different variable counts");
}

impl<'a> Add<&'a Polynomial> for &'a Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        check_dims(self, rhs);
        let mut out = self.clone();
        for (m, &c) in &rhs.terms {
            *out.terms.entry(m.clone()).or_insert(0.0) += c;
        }
        out.prune();
        out
    }
}

impl<'a> Sub<&'a Polynomial> for &'a Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        check_dims(self, rhs);
        let mut out = self.clone();
        for (m, &c) in &rhs.terms {
            *out.terms.entry(m.clone()).or_insert(0.0) -= c;
        }
        out.prune();
        out
    }
}

impl<'a> Mul<&'a Polynomial> for &'a Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        check_dims(self, rhs);
        let mut out = Polynomial::zero(self.nvars);
        for (ma, &ca) in &self.terms {
            for (mb, &cb) in &rhs.terms {
                *out.terms.entry(ma.mul(mb)).or_insert(0.0) += ca * cb;
            }
        }
        out.prune();
        out
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

macro_rules! forward_owned {
    ($tr:ident, $m:ident) => {
        impl $tr<Polynomial> for Polynomial {
            type Output = Polynomial;
            fn $m(self, rhs: Polynomial) -> Polynomial {
                (&self).$m(&rhs)
            }
        }
        impl<'a> $tr<&'a Polynomial> for Polynomial {
            type Output = Polynomial;
            fn $m(self, rhs: &Polynomial) -> Polynomial {
                (&self).$m(rhs)
            }
        }
    };
}
forward_owned!(Add, add);
forward_owned!(Sub, sub);
forward_owned!(Mul, mul);

impl Mul<f64> for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: f64) -> Polynomial {
        self.scale(rhs)
    }
}

impl Mul<f64> for Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: f64) -> Polynomial {
        self.scale(rhs)
    }
}

impl Neg for Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

pub struct PolyDisplay<'a> {
    poly: &'a Polynomial,
    vars: &'a VariableSet,
}

/// Shortest round-tripping representation, switching to exponent form at
/// the extremes so tiny coefficients do not print as long zero strings.
pub(crate) fn format_coefficient(c: f64) -> String {
    let a = c.abs();
    if a != 0.0 && !(1e-4..1e15).contains(&a) {
        format!("{c:e}")
    } else {
        format!("{c}")
    }
}

impl fmt::Display for PolyDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.poly.terms.is_empty() {
            return write!(f, "0");
        }
        for (k, (m, &c)) in self.poly.terms.iter().enumerate() {
            let mag = c.abs();
            let sign = if c < 0.0 { "-" } else { "+" };
            if k == 0 {
                if c < 0.0 {
                    write!(f, "-")?;
                }
            } else {
                write!(f, " {sign} ")?;
            }
            let mut factors: Vec<String> = Vec::new();
            for (i, &e) in m.exponents().iter().enumerate() {
                match e {
                    0 => {}
                    1 => factors.push(self.vars.names()[i].clone()),
                    _ => factors.push(format!("{}^{}", self.vars.names()[i], e)),
                }
            }
            if factors.is_empty() {
                write!(f, "{}", format_coefficient(mag))?;
            } else if mag == 1.0 {
                write!(f, "{}", factors.join("*"))?;
            } else {
                write!(f, "{}*{}", format_coefficient(mag), factors.join("*"))?;
            }
        }
        Ok(())
    }
}

/// Polynomial vector field `f(x)` with optional input matrix `g(x)` (n x m).
#[derive(Debug, Clone, PartialEq)]
pub struct PolyVectorField {
    drift: Vec<Polynomial>,
    input: Option<Vec<Vec<Polynomial>>>,
}

impl PolyVectorField {
    pub fn autonomous(drift: Vec<Polynomial>) -> Result<Self, PolyError> {
        let n = drift.len();
        if n == 0 {
            return Err(PolyError::DimensionMismatch { expected: 1, got: 0 });
        }
        for p in &drift {
            if p.nvars() != n {
                return Err(PolyError::DimensionMismatch { expected: n, got: p.nvars() });
            }
        }
        Ok(Self { drift, input: None })
    }

    /// `input` is row-major: `input[i][j]` multiplies `u_j` in `dx_i/dt`.
    pub fn control_affine(drift: Vec<Polynomial>, input: Vec<Vec<Polynomial>>) -> Result<Self, PolyError> {
        let mut field = Self::autonomous(drift)?;
        let n = field.dim();
        if input.len() != n {
            return Err(PolyError::DimensionMismatch { expected: n, got: input.len() });
        }
        let m = input[0].len();
        if m == 0 {
            return Err(PolyError::DimensionMismatch { expected: 1, got: 0 });
        }
        for row in &input {
            if row.len() != m {
                return Err(PolyError::DimensionMismatch { expected: m, got: row.len() });
            }
            for p in row {
                if p.nvars() != n {
                    return Err(PolyError::DimensionMismatch { expected: n, got: p.nvars() });
                }
            }
        }
        field.input = Some(input);
        Ok(field)
    }

    pub fn dim(&self) -> usize {
        self.drift.len()
    }

    /// Number of inputs (0 when autonomous).
    pub fn control_dim(&self) -> usize {
        self.input.as_ref().map_or(0, |g| g[0].len())
    }

    pub fn drift(&self) -> &[Polynomial] {
        &self.drift
    }

    pub fn input(&self) -> Option<&[Vec<Polynomial>]> {
        self.input.as_deref()
    }

    pub fn degree(&self) -> u32 {
        let d = self.drift.iter().map(Polynomial::degree).max().unwrap_or(0);
        let g = self
            .input
            .iter()
            .flatten()
            .flatten()
            .map(Polynomial::degree)
            .max()
            .unwrap_or(0);
        d.max(g)
    }

    /// `f + g u` as an autonomous field.
    pub fn closed_loop(&self, controller: &[Polynomial]) -> Result<PolyVectorField, PolyError> {
        let m = self.control_dim();
        if controller.len() != m {
            return Err(PolyError::DimensionMismatch { expected: m, got: controller.len() });
        }
        let mut comps = self.drift.clone();
        if let Some(g) = &self.input {
            for (i, row) in g.iter().enumerate() {
                for (gij, uj) in row.iter().zip(controller) {
                    if !gij.is_zero() {
                        comps[i] = &comps[i] + &(gij * uj);
                    }
                }
            }
        }
        PolyVectorField::autonomous(comps)
    }

    /// Drift only, dropping the input matrix.
    pub fn without_input(&self) -> PolyVectorField {
        PolyVectorField { drift: self.drift.clone(), input: None }
    }

    pub fn eval_drift(&self, x: &[f64]) -> Vec<f64> {
        self.drift.iter().map(|p| p.eval(x)).collect()
    }

    /// `g(x)` as a row-major n x m array.
    pub fn eval_input(&self, x: &[f64]) -> Vec<Vec<f64>> {
        match &self.input {
            None => vec![Vec::new(); self.dim()],
            Some(g) => g.iter().map(|row| row.iter().map(|p| p.eval(x)).collect()).collect(),
        }
    }

    /// `f(x) + g(x) u`.
    pub fn eval_with_input(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut dx = self.eval_drift(x);
        if let Some(g) = &self.input {
            for (i, row) in g.iter().enumerate() {
                for (gij, &uj) in row.iter().zip(u) {
                    dx[i] += gij.eval(x) * uj;
                }
            }
        }
        dx
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    vars: &'a VariableSet,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str, vars: &'a VariableSet) -> Self {
        Self { src: text.as_bytes(), pos: 0, vars }
    }

    fn n(&self) -> usize {
        self.vars.dim()
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, PolyError> {
        Err(PolyError::Syntax { pos: self.pos, msg: msg.into() })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn parse(mut self) -> Result<Polynomial, PolyError> {
        if self.peek().is_none() {
            return self.err("empty expression");
        }
        let p = self.expr()?;
        if let Some(c) = self.peek() {
            return self.err(format!("unexpected character `{}`", c as char));
        }
        Ok(p)
    }

    fn expr(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    acc = acc + self.term()?;
                }
                Some(b'-') => {
                    self.pos += 1;
                    acc = acc - self.term()?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.unary()?;
        while self.peek() == Some(b'*') {
            self.pos += 1;
            acc = acc * self.unary()?;
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Polynomial, PolyError> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(-self.unary()?)
            }
            Some(b'+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Polynomial, PolyError> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return self.err("expected non-negative integer exponent");
            }
            let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
            let k: u32 = match text.parse() {
                Ok(k) if k <= 64 => k,
                _ => {
                    self.pos = start;
                    return self.err("exponent too large");
                }
            };
            return Ok(base.pow(k));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Polynomial, PolyError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(b')') {
                    return self.err("expected `)`");
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
                match self.vars.index_of(name) {
                    Some(i) => Ok(Polynomial::var(self.n(), i)),
                    None => Err(PolyError::UnknownVariable { name: name.to_string(), pos: start }),
                }
            }
            Some(c) => self.err(format!("unexpected character `{}`", c as char)),
            None => self.err("unexpected end of input"),
        }
    }

    fn number(&mut self) -> Result<Polynomial, PolyError> {
        let start = self.pos;
        let s = self.src;
        while self.pos < s.len() && (s[self.pos].is_ascii_digit() || s[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < s.len() && (s[self.pos] == b'e' || s[self.pos] == b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < s.len() && (s[self.pos] == b'+' || s[self.pos] == b'-') {
                self.pos += 1;
            }
            let digits = self.pos;
            while self.pos < s.len() && s[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if digits == self.pos {
                // `2e` followed by something else: not an exponent
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&s[start..self.pos]).expect("ascii");
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Polynomial::constant(self.n(), v)),
            _ => {
                self.pos = start;
                self.err(format!("malformed number `{text}`"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn vars(n: usize) -> VariableSet {
        VariableSet::indexed(n)
    }

    fn p(s: &str, n: usize) -> Polynomial {
        Polynomial::parse(s, &vars(n)).unwrap()
    }

    #[test]
    fn parse_and_evaluate() {
        let q = p("x1^2 + x1*x2", 2);
        assert_eq!(q.evaluate(&[1.0, 2.0]).unwrap(), 3.0);
    }

    #[test]
    fn parse_example_dynamics() {
        let q = p("-x1 - x2 - x1^3", 2);
        assert_eq!(q.num_terms(), 3);
        assert_eq!(q.coefficient(&Monomial::new(vec![1, 0])), -1.0);
        assert_eq!(q.coefficient(&Monomial::new(vec![0, 1])), -1.0);
        assert_eq!(q.coefficient(&Monomial::new(vec![3, 0])), -1.0);

        let r = p("x2 - x3^2", 3);
        assert_eq!(r.num_terms(), 2);
        assert_eq!(r.coefficient(&Monomial::new(vec![0, 1, 0])), 1.0);
        assert_eq!(r.coefficient(&Monomial::new(vec![0, 0, 2])), -1.0);
    }

    #[test]
    fn parse_parentheses_and_powers() {
        let q = p("(x1 - 3)^2 + (x2-1)^2 - 1", 2);
        let expect = p("x1^2 - 6*x1 + x2^2 - 2*x2 + 9", 2);
        assert_eq!(q, expect);
        assert_eq!(p("2.5e-1*x1", 1).coefficient(&Monomial::var(1, 0)), 0.25);
        assert_eq!(p("-(x1)", 1), p("-1*x1", 1));
    }

    #[test]
    fn parse_errors() {
        let v = vars(2);
        assert!(matches!(
            Polynomial::parse("x1 + y", &v),
            Err(PolyError::UnknownVariable { ref name, pos: 5 }) if name == "y"
        ));
        assert!(matches!(Polynomial::parse("x1 +", &v), Err(PolyError::Syntax { pos: 4, .. })));
        assert!(matches!(Polynomial::parse("(x1", &v), Err(PolyError::Syntax { .. })));
        assert!(matches!(Polynomial::parse("x1 ^ x2", &v), Err(PolyError::Syntax { .. })));
        assert!(matches!(Polynomial::parse("", &v), Err(PolyError::Syntax { .. })));
        assert!(matches!(Polynomial::parse("1..2", &v), Err(PolyError::Syntax { pos: 0, .. })));
    }

    #[test]
    fn evaluate_examples() {
        assert_eq!(p("x1^2 + x1*x2 + x2^2", 2).evaluate(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(p("x1^2 + x2^2 + x3^2", 3).evaluate(&[2.0, 2.0, 0.0]).unwrap(), 8.0);
        assert_eq!(
            p("x1^2 + x1*x2 + x2^2 + x1^4 + x2^4", 2).evaluate(&[1.0, 0.0]).unwrap(),
            2.0
        );
        assert!(matches!(
            p("x1", 2).evaluate(&[1.0]),
            Err(PolyError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn differentiate_examples() {
        assert_eq!(p("x1^3", 1).differentiate(0).unwrap(), p("3*x1^2", 1));
        assert!(p("5", 2).differentiate(1).unwrap().is_zero());
        assert_eq!(p("x1^2*x2^2", 2).differentiate(1).unwrap(), p("2*x1^2*x2", 2));
        assert!(matches!(
            p("x1", 2).differentiate(2),
            Err(PolyError::IndexOutOfRange { index: 2, nvars: 2 })
        ));
    }

    #[test]
    fn lie_derivative_examples() {
        let rot = PolyVectorField::autonomous(vec![p("x2", 2), p("-x1", 2)]).unwrap();
        assert!(p("x1^2 + x2^2", 2).lie_derivative(&rot).unwrap().is_zero());

        let lin = PolyVectorField::autonomous(vec![p("x1", 1)]).unwrap();
        assert_eq!(p("x1^2", 1).lie_derivative(&lin).unwrap(), p("2*x1^2", 1));

        let f = PolyVectorField::autonomous(vec![p("-x1 + x2*x3^2", 3), p("-x2", 3), p("-x3", 3)]).unwrap();
        let vdot = p("x1^2 + x2^2 + x3^2", 3).lie_derivative(&f).unwrap();
        assert_eq!(vdot, p("2*x1*(-x1 + x2*x3^2) - 2*x2^2 - 2*x3^2", 3));

        let wrong = PolyVectorField::autonomous(vec![p("x1", 1)]).unwrap();
        assert!(p("x1", 2).lie_derivative(&wrong).is_err());
    }

    #[test]
    fn lie_derivative_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let f = PolyVectorField::autonomous(vec![p("-x1 + x2*x3^2", 3), p("-x2", 3), p("-x3", 3)]).unwrap();
        let v = p("x1^2 + x2^2 + x3^2", 3);
        let vdot = v.lie_derivative(&f).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let dx = f.eval_drift(&x);
            let h = 1e-6;
            let xp: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + h * b).collect();
            let xm: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a - h * b).collect();
            let fd = (v.eval(&xp) - v.eval(&xm)) / (2.0 * h);
            let an = vdot.eval(&x);
            assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{fd} vs {an}");
        }
    }

    #[test]
    fn canonical_form_drops_cancelled_terms() {
        let a = p("x1 + x2", 2);
        let b = p("x1", 2);
        let d = &a - &b;
        assert_eq!(d.num_terms(), 1);
        assert!((&b - &b).is_zero());
        let tiny = Polynomial::constant(1, 1e-15);
        assert!(tiny.is_zero());
    }

    #[test]
    fn graded_lex_order() {
        let q = p("x2^2 + x1*x2 + x1^2 + x2 + x1 + 1", 2);
        let order: Vec<Vec<u32>> = q.terms().map(|(m, _)| m.exponents().to_vec()).collect();
        assert_eq!(
            order,
            vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]
        );
    }

    #[test]
    fn display_round_trip_examples() {
        let v = vars(2);
        let q = p("0.0428 + 0.0033*x1^2 - 0.1396*x1*x2 - x2^4 + 1e-7*x1", 2);
        let s = q.display(&v).to_string();
        assert_eq!(Polynomial::parse(&s, &v).unwrap(), q);
        assert_eq!(p("-x1 + 2", 2).display(&v).to_string(), "2 - x1");
        assert_eq!(Polynomial::zero(2).display(&v).to_string(), "0");
    }

    #[test]
    fn closed_loop_field() {
        let v = vars(2);
        let one = Polynomial::constant(2, 1.0);
        let zero = Polynomial::zero(2);
        let f = PolyVectorField::control_affine(vec![p("x2", 2), p("-x1", 2)], vec![vec![zero], vec![one]]).unwrap();
        let cl = f.closed_loop(&[p("-x1 - x2", 2)]).unwrap();
        assert_eq!(cl.drift()[1].display(&v).to_string(), "-2*x1 - x2");
        assert_relative_eq!(f.eval_with_input(&[1.0, 2.0], &[3.0])[1], 2.0);
        assert!(f.closed_loop(&[]).is_err());
    }

    #[test]
    fn variable_set_validation() {
        assert!(VariableSet::new(&["x1", "x1"]).is_err());
        assert!(VariableSet::new(&["1x"]).is_err());
        assert!(VariableSet::new::<&str>(&[]).is_err());
        let v = VariableSet::new(&["a", "b_2"]).unwrap();
        assert_eq!(v.dim(), 2);
        assert_eq!(v.index_of("b_2"), Some(1));
    }
}
