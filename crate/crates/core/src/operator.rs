//! Block-sparse operators on `l2(X, C^m)` and the dense-component numerics
//! behind norms and Hermitian functional calculus.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsu::DisjointSet;
use crate::error::{Error, Result};
use crate::space::{FiniteMetricSpace, PointId};

pub type C = Complex64;
pub type Block = DMatrix<C>;

/// Blocks whose Frobenius norm falls below this fraction of the largest block
/// are dropped after arithmetic.
pub const PRUNE_REL: f64 = 1e-14;
/// Largest dense component handled by the exact norm.
pub const DENSE_THRESHOLD: usize = 2048;
pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 50_000;

pub fn c(re: f64) -> C {
    C::new(re, 0.0)
}

/// `m x m` matrix unit `E_pq`.
pub fn unit(m: usize, p: usize, q: usize) -> Block {
    let mut b = Block::zeros(m, m);
    b[(p, q)] = c(1.0);
    b
}

/// Largest singular value of a small dense block.
pub fn block_norm(b: &Block) -> f64 {
    if b.nrows() == 1 && b.ncols() == 1 {
        return b[(0, 0)].norm();
    }
    if b.is_empty() {
        return 0.0;
    }
    b.singular_values().max()
}

fn frob(b: &Block) -> f64 {
    b.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// A matrix of `row_fiber x col_fiber` blocks indexed by slot pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMatrix {
    nrows: usize,
    ncols: usize,
    row_fiber: usize,
    col_fiber: usize,
    blocks: BTreeMap<(usize, usize), Block>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Auto,
    Exact,
    Iterative,
}

impl BlockMatrix {
    pub fn zeros(nrows: usize, ncols: usize, row_fiber: usize, col_fiber: usize) -> Self {
        Self {
            nrows,
            ncols,
            row_fiber,
            col_fiber,
            blocks: BTreeMap::new(),
        }
    }

    pub fn square(n: usize, m: usize) -> Self {
        Self::zeros(n, n, m, m)
    }

    pub fn identity(n: usize, m: usize) -> Self {
        Self::diagonal(n, m, |_| Some(Block::identity(m, m)))
    }

    /// Block-diagonal matrix with `f(x)` at slot `x`.
    pub fn diagonal(n: usize, m: usize, f: impl Fn(usize) -> Option<Block>) -> Self {
        let mut out = Self::square(n, m);
        for x in 0..n {
            if let Some(b) = f(x) {
                out.insert(x, x, b);
            }
        }
        out.prune();
        out
    }

    /// Scalar diagonal `sum_x values[x] 1_x (x) I_m`.
    pub fn scalar_diagonal(values: &[f64], m: usize) -> Self {
        Self::diagonal(values.len(), m, |x| {
            (values[x] != 0.0).then(|| Block::identity(m, m) * c(values[x]))
        })
    }

    /// Projection onto the slots in `set`.
    pub fn projection(n: usize, m: usize, set: &[usize]) -> Self {
        let mut out = Self::square(n, m);
        for &x in set {
            out.insert(x, x, Block::identity(m, m));
        }
        out
    }

    pub fn from_blocks(
        nrows: usize,
        ncols: usize,
        row_fiber: usize,
        col_fiber: usize,
        blocks: impl IntoIterator<Item = ((usize, usize), Block)>,
    ) -> Self {
        let mut out = Self::zeros(nrows, ncols, row_fiber, col_fiber);
        for ((i, j), b) in blocks {
            out.insert(i, j, b);
        }
        out.prune();
        out
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row_fiber(&self) -> usize {
        self.row_fiber
    }

    pub fn col_fiber(&self) -> usize {
        self.col_fiber
    }

    pub fn is_square(&self) -> bool {
        self.nrows == self.ncols && self.row_fiber == self.col_fiber
    }

    pub fn nnz(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&Block> {
        self.blocks.get(&(i, j))
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&(usize, usize), &Block)> {
        self.blocks.iter()
    }

    /// Adds `b` into block `(i, j)`.
    pub fn insert(&mut self, i: usize, j: usize, b: Block) {
        assert!(i < self.nrows && j < self.ncols, "slot out of range");
        assert_eq!(b.shape(), (self.row_fiber, self.col_fiber), "block shape");
        match self.blocks.get_mut(&(i, j)) {
            Some(old) => *old += b,
            None => {
                self.blocks.insert((i, j), b);
            }
        }
    }

    /// Drops exact zeros and negligible blocks.
    pub fn prune(&mut self) {
        let max = self.blocks.values().map(frob).fold(0.0, f64::max);
        let cut = PRUNE_REL * max;
        self.blocks.retain(|_, b| {
            let n = frob(b);
            n > 0.0 && n > cut
        });
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if (self.nrows, self.ncols, self.row_fiber, self.col_fiber)
            != (other.nrows, other.ncols, other.row_fiber, other.col_fiber)
        {
            return Err(Error::Incompatible(format!(
                "shapes {}x{} (fiber {}x{}) and {}x{} (fiber {}x{})",
                self.nrows,
                self.ncols,
                self.row_fiber,
                self.col_fiber,
                other.nrows,
                other.ncols,
                other.row_fiber,
                other.col_fiber
            )));
        }
        Ok(())
    }

    pub fn adjoint(&self) -> Self {
        Self {
            nrows: self.ncols,
            ncols: self.nrows,
            row_fiber: self.col_fiber,
            col_fiber: self.row_fiber,
            blocks: self
                .blocks
                .iter()
                .map(|(&(i, j), b)| ((j, i), b.adjoint()))
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        let mut out = self.clone();
        for (&(i, j), b) in &other.blocks {
            out.insert(i, j, b.clone());
        }
        out.prune();
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scale(c(-1.0)))
    }

    pub fn scale(&self, z: C) -> Self {
        let mut out = self.clone();
        for b in out.blocks.values_mut() {
            *b *= z;
        }
        out.prune();
        out
    }

    pub fn scale_real(&self, t: f64) -> Self {
        self.scale(c(t))
    }

    /// Product `self * other`.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        if self.ncols != other.nrows || self.col_fiber != other.row_fiber {
            return Err(Error::Incompatible(format!(
                "cannot multiply {}x{} (fiber {}) by {}x{} (fiber {})",
                self.nrows, self.ncols, self.col_fiber, other.nrows, other.ncols, other.row_fiber
            )));
        }
        let mut right_rows: Vec<Vec<(usize, &Block)>> = vec![Vec::new(); other.nrows];
        for (&(k, j), b) in &other.blocks {
            right_rows[k].push((j, b));
        }
        let mut left_rows: BTreeMap<usize, Vec<(usize, &Block)>> = BTreeMap::new();
        for (&(i, k), a) in &self.blocks {
            left_rows.entry(i).or_default().push((k, a));
        }
        let rows: Vec<(usize, Vec<(usize, &Block)>)> = left_rows.into_iter().collect();
        let parts: Vec<Vec<((usize, usize), Block)>> = rows
            .par_iter()
            .map(|(i, row)| {
                let mut acc: BTreeMap<usize, Block> = BTreeMap::new();
                for &(k, a) in row {
                    for &(j, b) in &right_rows[k] {
                        let p = a * b;
                        match acc.get_mut(&j) {
                            Some(old) => *old += p,
                            None => {
                                acc.insert(j, p);
                            }
                        }
                    }
                }
                acc.into_iter().map(|(j, b)| ((*i, j), b)).collect()
            })
            .collect();
        let mut out = Self::zeros(self.nrows, other.ncols, self.row_fiber, other.col_fiber);
        out.blocks = parts.into_iter().flatten().collect();
        out.prune();
        Ok(out)
    }

    /// Product of several factors, left to right.
    pub fn chain(factors: &[&Self]) -> Result<Self> {
        let (first, rest) = factors
            .split_first()
            .ok_or_else(|| Error::InvalidParameter("empty product".into()))?;
        rest.iter().try_fold((*first).clone(), |acc, f| acc.mul(f))
    }

    /// Keeps blocks `(x, y)` with `x` in `rows` and `y` in `cols`.
    pub fn compress(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut rmask = vec![false; self.nrows];
        let mut cmask = vec![false; self.ncols];
        for &x in rows {
            rmask[x] = true;
        }
        for &y in cols {
            cmask[y] = true;
        }
        let mut out = Self::zeros(self.nrows, self.ncols, self.row_fiber, self.col_fiber);
        out.blocks = self
            .blocks
            .iter()
            .filter(|((i, j), _)| rmask[*i] && cmask[*j])
            .map(|(k, b)| (*k, b.clone()))
            .collect();
        out
    }

    /// Places this matrix inside a larger one at the given slot offsets.
    pub fn embed(&self, nrows: usize, ncols: usize, row_offset: usize, col_offset: usize) -> Self {
        let mut out = Self::zeros(nrows, ncols, self.row_fiber, self.col_fiber);
        out.blocks = self
            .blocks
            .iter()
            .map(|(&(i, j), b)| ((i + row_offset, j + col_offset), b.clone()))
            .collect();
        out
    }

    /// The sub-matrix on slot ranges.
    pub fn window(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Self {
        let mut out = Self::zeros(rows.len(), cols.len(), self.row_fiber, self.col_fiber);
        out.blocks = self
            .blocks
            .iter()
            .filter(|((i, j), _)| rows.contains(i) && cols.contains(j))
            .map(|(&(i, j), b)| ((i - rows.start, j - cols.start), b.clone()))
            .collect();
        out
    }

    /// Applies `f` to every block, keeping the slot pattern.
    pub fn map_blocks(&self, row_fiber: usize, col_fiber: usize, f: impl Fn(&Block) -> Block) -> Self {
        let mut out = Self::zeros(self.nrows, self.ncols, row_fiber, col_fiber);
        out.blocks = self.blocks.iter().map(|(k, b)| (*k, f(b))).collect();
        out.prune();
        out
    }

    pub fn to_dense(&self) -> DMatrix<C> {
        let (rf, cf) = (self.row_fiber, self.col_fiber);
        let mut d = DMatrix::zeros(self.nrows * rf, self.ncols * cf);
        for (&(i, j), b) in &self.blocks {
            d.view_mut((i * rf, j * cf), (rf, cf)).copy_from(b);
        }
        d
    }

    pub fn from_dense(d: &DMatrix<C>, row_fiber: usize, col_fiber: usize) -> Self {
        let (nrows, ncols) = (d.nrows() / row_fiber, d.ncols() / col_fiber);
        let mut blocks = Vec::new();
        for i in 0..nrows {
            for j in 0..ncols {
                let b = d.view((i * row_fiber, j * col_fiber), (row_fiber, col_fiber)).into_owned();
                if b.iter().any(|z| *z != C::new(0.0, 0.0)) {
                    blocks.push(((i, j), b));
                }
            }
        }
        Self::from_blocks(nrows, ncols, row_fiber, col_fiber, blocks)
    }

    /// Largest off-diagonal block norm.
    pub fn off_diagonal_mass(&self) -> f64 {
        self.blocks
            .iter()
            .filter(|((i, j), _)| i != j)
            .map(|(_, b)| block_norm(b))
            .fold(0.0, f64::max)
    }

    /// Whether every stored block is diagonal as an `m x m` matrix too.
    pub fn fully_diagonal_mass(&self) -> f64 {
        let mut worst = self.off_diagonal_mass();
        for ((i, j), b) in &self.blocks {
            if i == j {
                for p in 0..b.nrows() {
                    for q in 0..b.ncols() {
                        if p != q {
                            worst = worst.max(b[(p, q)].norm());
                        }
                    }
                }
            }
        }
        worst
    }

    pub fn apply_vec(&self, v: &DVector<C>) -> DVector<C> {
        let (rf, cf) = (self.row_fiber, self.col_fiber);
        let mut out = DVector::zeros(self.nrows * rf);
        for (&(i, j), b) in &self.blocks {
            let seg = b * v.rows(j * cf, cf);
            let mut dst = out.rows_mut(i * rf, rf);
            dst += seg;
        }
        out
    }

    /// Connected components of the support graph, as (row slots, column slots).
    fn components(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut dsu = DisjointSet::new(self.nrows + self.ncols);
        for &(i, j) in self.blocks.keys() {
            dsu.union(i, self.nrows + j);
        }
        let mut touched = vec![false; self.nrows + self.ncols];
        for &(i, j) in self.blocks.keys() {
            touched[i] = true;
            touched[self.nrows + j] = true;
        }
        let members: Vec<usize> = (0..self.nrows + self.ncols).filter(|&k| touched[k]).collect();
        dsu.groups(members)
            .into_iter()
            .map(|g| {
                let rows = g.iter().copied().filter(|&k| k < self.nrows).collect();
                let cols = g
                    .iter()
                    .copied()
                    .filter(|&k| k >= self.nrows)
                    .map(|k| k - self.nrows)
                    .collect();
                (rows, cols)
            })
            .collect()
    }

    fn dense_piece(&self, rows: &[usize], cols: &[usize]) -> DMatrix<C> {
        let (rf, cf) = (self.row_fiber, self.col_fiber);
        let rpos: BTreeMap<usize, usize> = rows.iter().enumerate().map(|(a, &x)| (x, a)).collect();
        let cpos: BTreeMap<usize, usize> = cols.iter().enumerate().map(|(a, &x)| (x, a)).collect();
        let mut d = DMatrix::zeros(rows.len() * rf, cols.len() * cf);
        for &i in rows {
            for (&(_, j), b) in self.blocks.range((i, 0)..(i + 1, 0)) {
                if let Some(&cj) = cpos.get(&j) {
                    d.view_mut((rpos[&i] * rf, cj * cf), (rf, cf)).copy_from(b);
                }
            }
        }
        d
    }

    pub fn norm(&self) -> f64 {
        self.norm_with(NormMode::Auto)
            .expect("automatic norm falls back to dense components")
    }

    /// Operator norm. Exact mode takes the largest singular value of each
    /// connected component of the support; iterative mode runs power
    /// iteration on `T*T`. Auto picks exact when every component fits below
    /// the dense threshold.
    pub fn norm_with(&self, mode: NormMode) -> Result<f64> {
        let comps = self.components();
        let fits = |(r, c): &(Vec<usize>, Vec<usize>)| {
            r.len() * self.row_fiber <= DENSE_THRESHOLD && c.len() * self.col_fiber <= DENSE_THRESHOLD
        };
        let exact = match mode {
            NormMode::Exact => true,
            NormMode::Iterative => false,
            NormMode::Auto => comps.iter().all(fits),
        };
        if exact {
            Ok(comps
                .par_iter()
                .map(|(r, c)| {
                    let d = self.dense_piece(r, c);
                    if d.is_empty() {
                        0.0
                    } else {
                        d.singular_values().max()
                    }
                })
                .reduce(|| 0.0, f64::max))
        } else {
            self.power_norm()
        }
    }

    fn power_norm(&self) -> Result<f64> {
        if self.is_zero() {
            return Ok(0.0);
        }
        let adj = self.adjoint();
        let n = self.ncols * self.col_fiber;
        // deterministic start with no special alignment
        let mut v = DVector::from_fn(n, |k, _| C::new(1.0 + (k as f64 * 0.7548776662).fract(), 0.0));
        v /= c(v.norm());
        let mut last = 0.0;
        for it in 1..=POWER_MAX_ITER {
            let w = adj.apply_vec(&self.apply_vec(&v));
            let lambda = w.norm();
            if lambda == 0.0 {
                return Ok(0.0);
            }
            v = w / c(lambda);
            if it > 1 && (lambda - last).abs() <= POWER_TOL * lambda {
                return Ok(lambda.sqrt());
            }
            last = lambda;
        }
        let residual = {
            let w = adj.apply_vec(&self.apply_vec(&v));
            (w - v.clone() * c(last)).norm()
        };
        Err(Error::Convergence {
            iterations: POWER_MAX_ITER,
            residual,
        })
    }

    /// Eigen-decompositions of the Hermitian part, one per connected
    /// component of the support. Slots outside every component are absent.
    pub fn hermitian_eigen(&self) -> Result<HermitianEigen> {
        if !self.is_square() {
            return Err(Error::Incompatible("Hermitian calculus needs a square matrix".into()));
        }
        let mut dsu = DisjointSet::new(self.nrows);
        let mut touched = vec![false; self.nrows];
        for &(i, j) in self.blocks.keys() {
            dsu.union(i, j);
            touched[i] = true;
            touched[j] = true;
        }
        let members: Vec<usize> = (0..self.nrows).filter(|&k| touched[k]).collect();
        let groups = dsu.groups(members);
        let parts = groups
            .into_par_iter()
            .map(|slots| {
                let d = self.dense_piece(&slots, &slots);
                let h = (&d + d.adjoint()) * c(0.5);
                let (vals, vecs) = hermitian_eig_dense(&h);
                (slots, vals, vecs)
            })
            .collect();
        Ok(HermitianEigen {
            n: self.nrows,
            m: self.row_fiber,
            parts,
        })
    }

    /// `f` applied to the Hermitian part by spectral calculus.
    pub fn hermitian_apply(&self, f: impl Fn(f64) -> f64 + Sync) -> Result<Self> {
        Ok(self.hermitian_eigen()?.apply(f))
    }

    /// Moore-Penrose inverse of a Hermitian matrix; eigenvalues at most
    /// `1e-12` times the largest magnitude count as zero.
    pub fn pseudo_inverse(&self) -> Result<Self> {
        let eig = self.hermitian_eigen()?;
        let cut = PINV_REL * eig.max_abs();
        Ok(eig.apply(|l| if l.abs() <= cut { 0.0 } else { 1.0 / l }))
    }

    /// Projection onto the range of a Hermitian matrix.
    pub fn support_projection(&self) -> Result<Self> {
        let eig = self.hermitian_eigen()?;
        let cut = PINV_REL * eig.max_abs();
        Ok(eig.apply(|l| if l.abs() <= cut { 0.0 } else { 1.0 }))
    }

    /// Smallest and largest eigenvalue of the Hermitian part (zero included
    /// when some slot is untouched).
    pub fn spectrum_bounds(&self) -> Result<(f64, f64)> {
        let eig = self.hermitian_eigen()?;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut covered = 0;
        for (slots, vals, _) in &eig.parts {
            covered += slots.len();
            lo = lo.min(vals.min());
            hi = hi.max(vals.max());
        }
        if covered < self.nrows {
            lo = lo.min(0.0);
            hi = hi.max(0.0);
        }
        Ok((lo, hi))
    }

    /// `|| self - other ||`.
    pub fn dist(&self, other: &Self) -> Result<f64> {
        Ok(self.sub(other)?.norm())
    }
}

pub const PINV_REL: f64 = 1e-12;

/// Per-component spectral data of a Hermitian block matrix.
pub struct HermitianEigen {
    n: usize,
    m: usize,
    parts: Vec<(Vec<usize>, DVector<f64>, DMatrix<C>)>,
}

/// Eigenpairs of a Hermitian matrix. nalgebra's solvers lose accuracy on
/// clustered spectra, so this goes through faer.
fn hermitian_eig_dense(h: &DMatrix<C>) -> (DVector<f64>, DMatrix<C>) {
    let n = h.nrows();
    let m = faer::Mat::<C>::from_fn(n, n, |i, j| h[(i, j)]);
    let eig = m
        .self_adjoint_eigen(faer::Side::Lower)
        .expect("Hermitian eigendecomposition converges");
    let vals = DVector::from_fn(n, |k, _| eig.S()[k].re);
    let vecs = DMatrix::from_fn(n, n, |i, k| eig.U()[(i, k)]);
    (vals, vecs)
}

impl HermitianEigen {
    pub fn max_abs(&self) -> f64 {
        self.parts
            .iter()
            .flat_map(|(_, v, _)| v.iter())
            .fold(0.0, |a, &b| a.max(b.abs()))
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.parts.iter().flat_map(|(_, v, _)| v.iter().copied()).collect()
    }

    pub fn apply(&self, f: impl Fn(f64) -> f64 + Sync) -> BlockMatrix {
        let m = self.m;
        let f0 = f(0.0);
        let mut out = BlockMatrix::square(self.n, m);
        let mut touched = vec![false; self.n];
        for (slots, vals, vecs) in &self.parts {
            for &s in slots {
                touched[s] = true;
            }
            let fv = DVector::from_iterator(vals.len(), vals.iter().map(|&l| c(f(l))));
            let scaled = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |a, b| vecs[(a, b)] * fv[b]);
            let d = scaled * vecs.adjoint();
            for (a, &i) in slots.iter().enumerate() {
                for (b, &j) in slots.iter().enumerate() {
                    let blk = d.view((a * m, b * m), (m, m)).into_owned();
                    out.blocks.insert((i, j), blk);
                }
            }
        }
        if f0 != 0.0 {
            for x in 0..self.n {
                if !touched[x] {
                    out.blocks.insert((x, x), Block::identity(m, m) * c(f0));
                }
            }
        }
        out.prune();
        out
    }
}

/// Report of the normalizer test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerReport {
    pub pass: bool,
    /// Worst off-diagonal mass relative to `max(1, ||a e a*||)`.
    pub worst: f64,
}

/// Tests `a D a* ⊆ D` and `a* D a ⊆ D` on the generators `1_y (x) E_pq`.
///
/// For such a generator `a e a*` is the rank-one operator `u v*` with
/// `u_x = a_{x,y} e_p` and `v_x = a_{x,y} e_q`, so its off-diagonal blocks
/// have norms `|u_x| |v_x'|` for `x != x'` and its norm is `|u| |v|`.
pub fn normalizer_check(a: &BlockMatrix, tol: f64) -> NormalizerReport {
    let one = one_sided_normalizer(a, tol);
    let two = one_sided_normalizer(&a.adjoint(), tol);
    NormalizerReport {
        pass: one.pass && two.pass,
        worst: one.worst.max(two.worst),
    }
}

fn one_sided_normalizer(a: &BlockMatrix, tol: f64) -> NormalizerReport {
    let mut cols: BTreeMap<usize, Vec<&Block>> = BTreeMap::new();
    for (&(_, y), b) in &a.blocks {
        cols.entry(y).or_default().push(b);
    }
    let mf = a.col_fiber;
    let per_col: Vec<(bool, f64)> = cols
        .par_iter()
        .map(|(_, col)| {
            // norms[p][k] = |(block k) e_p|
            let norms: Vec<Vec<f64>> = (0..mf)
                .map(|p| col.iter().map(|b| b.column(p).norm()).collect())
                .collect();
            let mut pass = true;
            let mut worst: f64 = 0.0;
            for p in 0..mf {
                let tot_p = norms[p].iter().map(|v| v * v).sum::<f64>().sqrt();
                for q in 0..mf {
                    let tot_q = norms[q].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let mut off: f64 = 0.0;
                    for (k, u) in norms[p].iter().enumerate() {
                        for (l, v) in norms[q].iter().enumerate() {
                            if k != l {
                                off = off.max(u * v);
                            }
                        }
                    }
                    let scale = (tot_p * tot_q).max(1.0);
                    pass &= off <= tol * scale;
                    worst = worst.max(off / scale);
                }
            }
            (pass, worst)
        })
        .collect();
    NormalizerReport {
        pass: per_col.iter().all(|p| p.0),
        worst: per_col.iter().map(|p| p.1).fold(0.0, f64::max),
    }
}

/// A block-sparse operator on `l2(X, C^m)` over a shared metric space.
#[derive(Clone, Debug)]
pub struct BandOperator {
    space: Arc<FiniteMetricSpace>,
    mat: BlockMatrix,
}

impl PartialEq for BandOperator {
    fn eq(&self, other: &Self) -> bool {
        self.mat == other.mat && self.space.ids() == other.space.ids()
    }
}

#[derive(Serialize, Deserialize)]
struct OperatorFile {
    fiber: usize,
    blocks: Vec<BlockEntry>,
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    x: PointId,
    y: PointId,
    block: Vec<Vec<[f64; 2]>>,
}

pub fn block_to_json(b: &Block) -> Vec<Vec<[f64; 2]>> {
    (0..b.nrows())
        .map(|i| (0..b.ncols()).map(|j| [b[(i, j)].re, b[(i, j)].im]).collect())
        .collect()
}

pub fn block_from_json(rows: &[Vec<[f64; 2]>], nrows: usize, ncols: usize) -> Result<Block> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidParameter(format!("block must be {nrows}x{ncols}")));
    }
    Ok(Block::from_fn(nrows, ncols, |i, j| C::new(rows[i][j][0], rows[i][j][1])))
}

impl BandOperator {
    pub fn new(space: Arc<FiniteMetricSpace>, mat: BlockMatrix) -> Result<Self> {
        if !mat.is_square() || mat.nrows() != space.len() {
            return Err(Error::Incompatible(format!(
                "matrix with {} slots does not act on a space of {} points",
                mat.nrows(),
                space.len()
            )));
        }
        Ok(Self { space, mat })
    }

    pub fn zero(space: Arc<FiniteMetricSpace>, m: usize) -> Self {
        let n = space.len();
        Self {
            space,
            mat: BlockMatrix::square(n, m),
        }
    }

    pub fn identity(space: Arc<FiniteMetricSpace>, m: usize) -> Self {
        let n = space.len();
        Self {
            space,
            mat: BlockMatrix::identity(n, m),
        }
    }

    /// Partial translation with identity blocks on the given pairs.
    pub fn partial_translation(space: Arc<FiniteMetricSpace>, m: usize, pairs: &[(usize, usize)]) -> Self {
        let n = space.len();
        let mat = BlockMatrix::from_blocks(n, n, m, m, pairs.iter().map(|&k| (k, Block::identity(m, m))));
        Self { space, mat }
    }

    pub fn space(&self) -> &Arc<FiniteMetricSpace> {
        &self.space
    }

    pub fn mat(&self) -> &BlockMatrix {
        &self.mat
    }

    pub fn into_mat(self) -> BlockMatrix {
        self.mat
    }

    pub fn fiber(&self) -> usize {
        self.mat.row_fiber()
    }

    fn check(&self, other: &Self) -> Result<()> {
        let same = Arc::ptr_eq(&self.space, &other.space) || self.space.ids() == other.space.ids();
        if !same {
            return Err(Error::Incompatible("operators live on different spaces".into()));
        }
        if self.fiber() != other.fiber() {
            return Err(Error::Incompatible(format!(
                "fiber dimensions {} and {}",
                self.fiber(),
                other.fiber()
            )));
        }
        Ok(())
    }

    fn with(&self, mat: BlockMatrix) -> Self {
        Self {
            space: self.space.clone(),
            mat,
        }
    }

    pub fn compose(&self, other: &Self) -> Result<Self> {
        self.check(other)?;
        Ok(self.with(self.mat.mul(&other.mat)?))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check(other)?;
        Ok(self.with(self.mat.add(&other.mat)?))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check(other)?;
        Ok(self.with(self.mat.sub(&other.mat)?))
    }

    pub fn scale(&self, z: C) -> Self {
        self.with(self.mat.scale(z))
    }

    pub fn adjoint(&self) -> Self {
        self.with(self.mat.adjoint())
    }

    /// Support pairs and propagation (largest distance over the support).
    pub fn prop_support(&self) -> (Vec<(usize, usize)>, f64) {
        let support: Vec<(usize, usize)> = self.mat.blocks().map(|(k, _)| *k).collect();
        let prop = support
            .iter()
            .map(|&(x, y)| self.space.dist(x, y))
            .fold(0.0, f64::max);
        (support, prop)
    }

    pub fn propagation(&self) -> f64 {
        self.prop_support().1
    }

    pub fn operator_norm(&self) -> f64 {
        self.mat.norm()
    }

    pub fn operator_norm_with(&self, mode: NormMode) -> Result<f64> {
        self.mat.norm_with(mode)
    }

    /// `1_V T 1_U`.
    pub fn compress(&self, rows: &[usize], cols: &[usize]) -> Self {
        self.with(self.mat.compress(rows, cols))
    }

    /// Whether the off-diagonal mass is at most `tol * max(1, ||T||)`.
    pub fn diagonal_membership(&self, tol: f64) -> (bool, f64) {
        diagonal_membership(&self.mat, tol)
    }

    pub fn normalizer_check(&self, tol: f64) -> NormalizerReport {
        normalizer_check(&self.mat, tol)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let file = OperatorFile {
            fiber: self.fiber(),
            blocks: self
                .mat
                .blocks()
                .map(|(&(x, y), b)| BlockEntry {
                    x: self.space.id(x).clone(),
                    y: self.space.id(y).clone(),
                    block: block_to_json(b),
                })
                .collect(),
        };
        serde_json::to_value(file).expect("operator serializes")
    }

    pub fn from_json(value: serde_json::Value, space: Arc<FiniteMetricSpace>) -> Result<Self> {
        let file: OperatorFile = serde_json::from_value(value)?;
        let m = file.fiber;
        if m == 0 {
            return Err(Error::InvalidParameter("fiber must be positive".into()));
        }
        let mut blocks = Vec::with_capacity(file.blocks.len());
        for e in &file.blocks {
            let x = space.index_of(&e.x)?;
            let y = space.index_of(&e.y)?;
            blocks.push(((x, y), block_from_json(&e.block, m, m)?));
        }
        let n = space.len();
        Ok(Self {
            space,
            mat: BlockMatrix::from_blocks(n, n, m, m, blocks),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixFile {
    rows: usize,
    cols: usize,
    row_fiber: usize,
    col_fiber: usize,
    blocks: Vec<IndexedBlock>,
}

#[derive(Serialize, Deserialize)]
struct IndexedBlock {
    i: usize,
    j: usize,
    block: Vec<Vec<[f64; 2]>>,
}

impl BlockMatrix {
    pub fn to_json(&self) -> serde_json::Value {
        let file = MatrixFile {
            rows: self.nrows,
            cols: self.ncols,
            row_fiber: self.row_fiber,
            col_fiber: self.col_fiber,
            blocks: self
                .blocks
                .iter()
                .map(|(&(i, j), b)| IndexedBlock {
                    i,
                    j,
                    block: block_to_json(b),
                })
                .collect(),
        };
        serde_json::to_value(file).expect("matrix serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let f: MatrixFile = serde_json::from_value(value)?;
        let mut blocks = Vec::with_capacity(f.blocks.len());
        for e in &f.blocks {
            if e.i >= f.rows || e.j >= f.cols {
                return Err(Error::InvalidParameter(format!("block ({}, {}) out of range", e.i, e.j)));
            }
            blocks.push(((e.i, e.j), block_from_json(&e.block, f.row_fiber, f.col_fiber)?));
        }
        Ok(Self::from_blocks(f.rows, f.cols, f.row_fiber, f.col_fiber, blocks))
    }
}

pub fn diagonal_membership(t: &BlockMatrix, tol: f64) -> (bool, f64) {
    let mass = t.off_diagonal_mass();
    if mass == 0.0 {
        return (true, 0.0);
    }
    (mass <= tol * t.norm().max(1.0), mass)
}
