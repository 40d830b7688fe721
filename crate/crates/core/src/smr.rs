//! Square matrix representation: `p(x) = Z(x)^T Q Z(x)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::polynomial::{Monomial, Polynomial};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SmrError {
    #[error("monomial {0:?} cannot be produced by the basis")]
    NotRepresentable(Vec<u32>),
    #[error("matrix is {got}x{got}, basis has {expected} entries")]
    SizeMismatch { expected: usize, got: usize },
}

/// Monomial vector `Z(x)` in graded-lex order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonomialBasis {
    nvars: usize,
    min_degree: u32,
    max_degree: u32,
    entries: Vec<Monomial>,
}

impl MonomialBasis {
    /// All monomials of degree `<= d`.
    pub fn standard(nvars: usize, d: u32) -> Self {
        Self::with_degrees(nvars, 0, d)
    }

    /// All monomials with `lo <= degree <= hi`.
    pub fn with_degrees(nvars: usize, lo: u32, hi: u32) -> Self {
        assert!(nvars >= 1, "basis needs at least one variable");
        let mut entries = Vec::new();
        for d in lo..=hi {
            let mut exps = vec![0u32; nvars];
            push_degree(&mut entries, &mut exps, 0, d);
        }
        entries.sort();
        Self { nvars, min_degree: lo, max_degree: hi, entries }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn min_degree(&self) -> u32 {
        self.min_degree
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    pub fn entries(&self) -> &[Monomial] {
        &self.entries
    }

    pub fn index_of(&self, m: &Monomial) -> Option<usize> {
        self.entries.binary_search(m).ok()
    }

    /// Evaluate `Z(x)`.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.entries.iter().map(|m| m.eval(x)).collect()
    }
}

fn push_degree(out: &mut Vec<Monomial>, exps: &mut [u32], var: usize, remaining: u32) {
    if var == exps.len() - 1 {
        exps[var] = remaining;
        out.push(Monomial::new(exps.to_vec()));
        exps[var] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        exps[var] = e;
        push_degree(out, exps, var + 1, remaining - e);
    }
    exps[var] = 0;
}

/// Index of `(i, j)`, `i <= j`, in row-major packed upper-triangle storage.
pub fn packed_index(dim: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * dim - i * i.saturating_sub(1) / 2 + (j - i)
}

/// Number of entries in the packed upper triangle of a `dim x dim` matrix.
pub fn packed_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// For each product monomial, the upper-triangle pairs `(i, j)` with
/// `Z_i Z_j` equal to it, together with their multiplicity (1 on the
/// diagonal, 2 off it).
#[derive(Debug, Clone)]
pub struct CoefficientMap {
    dim: usize,
    nvars: usize,
    entries: BTreeMap<Monomial, Vec<(usize, usize, f64)>>,
}

impl CoefficientMap {
    pub fn new(basis: &MonomialBasis) -> Self {
        let z = basis.entries();
        let mut entries: BTreeMap<Monomial, Vec<(usize, usize, f64)>> = BTreeMap::new();
        for i in 0..z.len() {
            for j in i..z.len() {
                let mult = if i == j { 1.0 } else { 2.0 };
                entries.entry(z[i].mul(&z[j])).or_default().push((i, j, mult));
            }
        }
        Self { dim: z.len(), nvars: basis.nvars(), entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contributions(&self, m: &Monomial) -> &[(usize, usize, f64)] {
        self.entries.get(m).map_or(&[], Vec::as_slice)
    }

    pub fn monomials(&self) -> impl Iterator<Item = &Monomial> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Monomial, &[(usize, usize, f64)])> {
        self.entries.iter().map(|(m, v)| (m, v.as_slice()))
    }

    /// Coefficients of `Z^T Q Z` from the packed upper triangle of `Q`.
    pub fn apply(&self, vech: &[f64]) -> Polynomial {
        assert_eq!(vech.len(), packed_len(self.dim));
        Polynomial::from_terms(
            self.nvars,
            self.entries.iter().map(|(m, pairs)| {
                let c = pairs
                    .iter()
                    .map(|&(i, j, w)| w * vech[packed_index(self.dim, i, j)])
                    .sum();
                (m.clone(), c)
            }),
        )
    }
}

/// Symmetric Gram matrix over a monomial basis.
#[derive(Debug, Clone, PartialEq)]
pub struct GramForm {
    basis: MonomialBasis,
    upper: Vec<f64>,
}

impl GramForm {
    pub fn zeros(basis: MonomialBasis) -> Self {
        let n = basis.len();
        Self { basis, upper: vec![0.0; packed_len(n)] }
    }

    /// Build from a full matrix, symmetrizing `(Q + Q^T)/2`.
    pub fn from_matrix(basis: MonomialBasis, q: &DMatrix<f64>) -> Result<Self, SmrError> {
        let n = basis.len();
        if q.nrows() != n || q.ncols() != n {
            return Err(SmrError::SizeMismatch { expected: n, got: q.nrows() });
        }
        let mut g = Self::zeros(basis);
        for i in 0..n {
            for j in i..n {
                g.set(i, j, 0.5 * (q[(i, j)] + q[(j, i)]));
            }
        }
        Ok(g)
    }

    pub fn from_packed(basis: MonomialBasis, upper: Vec<f64>) -> Result<Self, SmrError> {
        let n = basis.len();
        if upper.len() != packed_len(n) {
            return Err(SmrError::SizeMismatch { expected: packed_len(n), got: upper.len() });
        }
        Ok(Self { basis, upper })
    }

    /// The Gram matrix that places each coefficient of `p` on a single
    /// entry: the diagonal `(b, b)` when the monomial is `b^2` for a basis
    /// element `b`, otherwise the first pair in graded-lex order whose two
    /// factors have the closest degrees.
    pub fn canonical(p: &Polynomial, basis: &MonomialBasis) -> Result<Self, SmrError> {
        let map = CoefficientMap::new(basis);
        let mut g = Self::zeros(basis.clone());
        for (m, c) in p.terms() {
            let (i, j, w) = canonical_pair(&map, basis, m)
                .ok_or_else(|| SmrError::NotRepresentable(m.exponents().to_vec()))?;
            g.set(i, j, c / w);
        }
        Ok(g)
    }

    pub fn basis(&self) -> &MonomialBasis {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.upper[packed_index(self.dim(), i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = packed_index(self.dim(), i, j);
        self.upper[k] = v;
    }

    pub fn packed(&self) -> &[f64] {
        &self.upper
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.get(i, j))
    }

    pub fn expand(&self) -> Polynomial {
        CoefficientMap::new(&self.basis).apply(&self.upper)
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.get(i, i)).sum()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.to_matrix()).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    pub fn add(&self, other: &GramForm) -> GramForm {
        assert_eq!(self.basis, other.basis);
        GramForm {
            basis: self.basis.clone(),
            upper: self.upper.iter().zip(&other.upper).map(|(a, b)| a + b).collect(),
        }
    }
}

pub(crate) fn canonical_pair(
    map: &CoefficientMap,
    basis: &MonomialBasis,
    m: &Monomial,
) -> Option<(usize, usize, f64)> {
    if let Some(i) = m.sqrt().and_then(|r| basis.index_of(&r)) {
        return Some((i, i, 1.0));
    }
    let z = basis.entries();
    map.contributions(m)
        .iter()
        .min_by_key(|&&(i, j, _)| (z[j].degree() - z[i].degree().min(z[j].degree()), i, j))
        .copied()
}

/// Trace of the canonical Gram matrix of `p` as a linear functional on its
/// coefficients: the sum of coefficients of monomials `b^2`, `b` in basis.
pub fn canonical_trace_weights(basis: &MonomialBasis) -> Vec<Monomial> {
    basis.entries().iter().map(|b| b.mul(b)).collect()
}
