//! Completely positive maps between finite-dimensional algebras and band
//! algebras: Choi certificates, order zero structure, supporting
//! homomorphisms, functional calculus, bump functions and the commutation
//! property.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{c, unit, Block, BlockMatrix, C, PINV_REL};
use crate::space::FiniteMetricSpace;

/// Choi matrices with an eigenvalue below this are rejected.
pub const CHOI_TOL: f64 = 1e-10;
/// Largest coordinate dimension of a Choi window.
pub const CHOI_MAX_COORDS: usize = 512;
/// Deviation allowed in the identities checked by the factorization.
pub const FACTOR_TOL: f64 = 1e-8;
pub const DEFAULT_ORDER_ZERO_TRIALS: usize = 200;
const ORDER_ZERO_TOL: f64 = 1e-9;
const FACTOR_SAMPLES: usize = 64;

/// `F = M_{n_1} ⊕ ... ⊕ M_{n_K}` with `m x m` fiber blocks, stored as a
/// block-diagonal block matrix over `sum n_k` slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiniteDimAlgebra {
    pub summand_sizes: Vec<usize>,
    pub fiber_dim: usize,
}

impl FiniteDimAlgebra {
    pub fn new(summand_sizes: Vec<usize>, fiber_dim: usize) -> Result<Self> {
        if fiber_dim == 0 || summand_sizes.iter().any(|&n| n == 0) {
            return Err(Error::InvalidParameter("empty summand or fiber".into()));
        }
        Ok(Self {
            summand_sizes,
            fiber_dim,
        })
    }

    pub fn slots(&self) -> usize {
        self.summand_sizes.iter().sum()
    }

    pub fn offset(&self, k: usize) -> usize {
        self.summand_sizes[..k].iter().sum()
    }

    pub fn summand_range(&self, k: usize) -> Range<usize> {
        let o = self.offset(k);
        o..o + self.summand_sizes[k]
    }

    pub fn summand_of(&self, slot: usize) -> usize {
        let mut acc = 0;
        for (k, &n) in self.summand_sizes.iter().enumerate() {
            acc += n;
            if slot < acc {
                return k;
            }
        }
        panic!("slot {slot} out of range")
    }

    /// `e_{s,t} (x) b` in summand `k`.
    pub fn matrix_unit(&self, k: usize, s: usize, t: usize, b: Block) -> BlockMatrix {
        let o = self.offset(k);
        let n = self.slots();
        BlockMatrix::from_blocks(n, n, self.fiber_dim, self.fiber_dim, [((o + s, o + t), b)])
    }

    /// Mass of `a` outside the summand blocks.
    pub fn leakage(&self, a: &BlockMatrix) -> f64 {
        a.blocks()
            .filter(|((i, j), _)| self.summand_of(*i) != self.summand_of(*j))
            .map(|(_, b)| crate::operator::block_norm(b))
            .fold(0.0, f64::max)
    }
}

/// Domain or codomain of a map.
#[derive(Clone, Debug)]
pub enum AlgebraDesc {
    Band {
        space: Arc<FiniteMetricSpace>,
        fiber: usize,
    },
    Fd(FiniteDimAlgebra),
}

impl PartialEq for AlgebraDesc {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Self::Band { space: a, fiber: f }, Self::Band { space: b, fiber: g }) => {
                f == g && (Arc::ptr_eq(a, b) || a.ids() == b.ids())
            }
            (Self::Fd(a), Self::Fd(b)) => a == b,
            _ => false,
        }
    }
}

impl AlgebraDesc {
    pub fn slots(&self) -> usize {
        match self {
            Self::Band { space, .. } => space.len(),
            Self::Fd(f) => f.slots(),
        }
    }

    pub fn fiber(&self) -> usize {
        match self {
            Self::Band { fiber, .. } => *fiber,
            Self::Fd(f) => f.fiber_dim,
        }
    }

    pub fn unit(&self) -> BlockMatrix {
        BlockMatrix::identity(self.slots(), self.fiber())
    }

    pub fn zero(&self) -> BlockMatrix {
        BlockMatrix::square(self.slots(), self.fiber())
    }

    /// Slot ranges inside which elements may have nonzero blocks.
    pub fn blocks_of_slots(&self) -> Vec<Range<usize>> {
        match self {
            Self::Band { space, .. } => vec![0..space.len()],
            Self::Fd(f) => (0..f.summand_sizes.len()).map(|k| f.summand_range(k)).collect(),
        }
    }

    fn accepts(&self, a: &BlockMatrix) -> Result<()> {
        if a.nrows() != self.slots() || a.ncols() != self.slots() || a.row_fiber() != self.fiber() || a.col_fiber() != self.fiber() {
            return Err(Error::Incompatible(format!(
                "element of shape {}x{} (fiber {}) given to an algebra with {} slots and fiber {}",
                a.nrows(),
                a.ncols(),
                a.row_fiber(),
                self.slots(),
                self.fiber()
            )));
        }
        Ok(())
    }

    fn to_json(&self) -> serde_json::Value {
        match self {
            Self::Band { space, fiber } => serde_json::json!({"kind": "band", "points": space.len(), "fiber": fiber}),
            Self::Fd(f) => serde_json::json!({"kind": "fd", "summand_sizes": f.summand_sizes, "fiber": f.fiber_dim}),
        }
    }

    fn from_json(v: &serde_json::Value, space: Option<&Arc<FiniteMetricSpace>>) -> Result<Self> {
        let kind = v["kind"].as_str().unwrap_or_default();
        let fiber = v["fiber"]
            .as_u64()
            .ok_or_else(|| Error::InvalidParameter("algebra needs a fiber".into()))? as usize;
        match kind {
            "band" => {
                let space = space
                    .ok_or_else(|| Error::InvalidParameter("band algebra needs its space".into()))?
                    .clone();
                if v["points"].as_u64() != Some(space.len() as u64) {
                    return Err(Error::Incompatible("point count does not match the space".into()));
                }
                Ok(Self::Band { space, fiber })
            }
            "fd" => {
                let sizes: Vec<usize> = serde_json::from_value(v["summand_sizes"].clone())?;
                Ok(Self::Fd(FiniteDimAlgebra::new(sizes, fiber)?))
            }
            other => Err(Error::InvalidParameter(format!("unknown algebra kind {other:?}"))),
        }
    }
}

/// One summand `left * a * right` of a structural map.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub left: BlockMatrix,
    pub right: BlockMatrix,
}

impl Term {
    pub fn conjugation(v: BlockMatrix) -> Self {
        let right = v.adjoint();
        Self { left: v, right }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    /// `a ↦ sum_t left_t a right_t`.
    Structural(Vec<Term>),
    /// Matrix acting on the row-major vectorization of the dense element.
    Dense(DMatrix<C>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpMap {
    pub domain: AlgebraDesc,
    pub codomain: AlgebraDesc,
    pub action: Action,
}

fn vec_rows(d: &DMatrix<C>) -> DVector<C> {
    let n = d.ncols();
    DVector::from_fn(d.nrows() * n, |k, _| d[(k / n, k % n)])
}

fn unvec_rows(v: &DVector<C>, n: usize) -> DMatrix<C> {
    DMatrix::from_fn(n, n, |i, j| v[i * n + j])
}

impl CpMap {
    pub fn structural(domain: AlgebraDesc, codomain: AlgebraDesc, terms: Vec<Term>) -> Result<Self> {
        for t in &terms {
            let ok = t.left.nrows() == codomain.slots()
                && t.left.row_fiber() == codomain.fiber()
                && t.left.ncols() == domain.slots()
                && t.left.col_fiber() == domain.fiber()
                && t.right.nrows() == domain.slots()
                && t.right.row_fiber() == domain.fiber()
                && t.right.ncols() == codomain.slots()
                && t.right.col_fiber() == codomain.fiber();
            if !ok {
                return Err(Error::Incompatible("term factors do not match domain and codomain".into()));
            }
        }
        Ok(Self {
            domain,
            codomain,
            action: Action::Structural(terms),
        })
    }

    pub fn dense(domain: AlgebraDesc, codomain: AlgebraDesc, matrix: DMatrix<C>) -> Result<Self> {
        let dd = (domain.slots() * domain.fiber()).pow(2);
        let dc = (codomain.slots() * codomain.fiber()).pow(2);
        if matrix.shape() != (dc, dd) {
            return Err(Error::Incompatible(format!(
                "dense action must be {dc}x{dd}, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(Self {
            domain,
            codomain,
            action: Action::Dense(matrix),
        })
    }

    pub fn identity(alg: AlgebraDesc) -> Self {
        let u = alg.unit();
        Self {
            domain: alg.clone(),
            codomain: alg,
            action: Action::Structural(vec![Term {
                left: u.clone(),
                right: u,
            }]),
        }
    }

    pub fn terms(&self) -> Option<&[Term]> {
        match &self.action {
            Action::Structural(t) => Some(t),
            Action::Dense(_) => None,
        }
    }

    pub fn apply(&self, a: &BlockMatrix) -> Result<BlockMatrix> {
        self.domain.accepts(a)?;
        match &self.action {
            Action::Structural(terms) => {
                let parts: Vec<BlockMatrix> = terms
                    .par_iter()
                    .map(|t| BlockMatrix::chain(&[&t.left, a, &t.right]))
                    .collect::<Result<_>>()?;
                let mut out = self.codomain.zero();
                for p in parts {
                    out = out.add(&p)?;
                }
                Ok(out)
            }
            Action::Dense(m) => {
                let v = m * vec_rows(&a.to_dense());
                let n = self.codomain.slots() * self.codomain.fiber();
                Ok(BlockMatrix::from_dense(&unvec_rows(&v, n), self.codomain.fiber(), self.codomain.fiber()))
            }
        }
    }

    /// Dense matrix of the action.
    pub fn to_dense(&self) -> DMatrix<C> {
        match &self.action {
            Action::Dense(m) => m.clone(),
            Action::Structural(terms) => {
                let mut m = DMatrix::zeros(
                    (self.codomain.slots() * self.codomain.fiber()).pow(2),
                    (self.domain.slots() * self.domain.fiber()).pow(2),
                );
                for t in terms {
                    m += t.left.to_dense().kronecker(&t.right.to_dense().transpose());
                }
                m
            }
        }
    }

    /// `a ↦ l * self(a) * r` with `l`, `r` codomain elements.
    pub fn with_output_factors(&self, l: &BlockMatrix, r: &BlockMatrix) -> Result<Self> {
        self.codomain.accepts(l)?;
        self.codomain.accepts(r)?;
        let action = match &self.action {
            Action::Structural(terms) => Action::Structural(
                terms
                    .iter()
                    .map(|t| {
                        Ok(Term {
                            left: l.mul(&t.left)?,
                            right: t.right.mul(r)?,
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            Action::Dense(m) => Action::Dense(l.to_dense().kronecker(&r.to_dense().transpose()) * m),
        };
        Ok(Self {
            domain: self.domain.clone(),
            codomain: self.codomain.clone(),
            action,
        })
    }

    /// `b ↦ self(l * b * r)` on a new domain, with `l` (old domain slots by
    /// new slots) and `r` (new by old).
    pub fn with_input_factors(&self, domain: AlgebraDesc, l: &BlockMatrix, r: &BlockMatrix) -> Result<Self> {
        let fits = l.nrows() == self.domain.slots()
            && l.ncols() == domain.slots()
            && r.nrows() == domain.slots()
            && r.ncols() == self.domain.slots()
            && l.row_fiber() == self.domain.fiber()
            && l.col_fiber() == domain.fiber()
            && r.row_fiber() == domain.fiber()
            && r.col_fiber() == self.domain.fiber();
        if !fits {
            return Err(Error::Incompatible("input factors do not match the domains".into()));
        }
        let action = match &self.action {
            Action::Structural(terms) => Action::Structural(
                terms
                    .iter()
                    .map(|t| {
                        Ok(Term {
                            left: t.left.mul(l)?,
                            right: r.mul(&t.right)?,
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            Action::Dense(m) => Action::Dense(m * l.to_dense().kronecker(&r.to_dense().transpose())),
        };
        Ok(Self {
            domain,
            codomain: self.codomain.clone(),
            action,
        })
    }

    /// Restriction to the slots `keep` (ascending) of the domain, whose
    /// grouping into summands is `sizes`.
    pub fn restrict_domain(&self, keep: &[usize], sizes: Vec<usize>) -> Result<Self> {
        let m = self.domain.fiber();
        let sub = FiniteDimAlgebra::new(sizes, m)?;
        if sub.slots() != keep.len() {
            return Err(Error::InvalidParameter("summand sizes do not add up to the kept slots".into()));
        }
        let j = BlockMatrix::from_blocks(
            self.domain.slots(),
            keep.len(),
            m,
            m,
            keep.iter().enumerate().map(|(new, &old)| ((old, new), Block::identity(m, m))),
        );
        self.with_input_factors(AlgebraDesc::Fd(sub), &j, &j.adjoint())
    }

    pub fn scale(&self, t: f64) -> Self {
        let action = match &self.action {
            Action::Structural(terms) => Action::Structural(
                terms
                    .iter()
                    .map(|x| Term {
                        left: x.left.scale_real(t),
                        right: x.right.clone(),
                    })
                    .collect(),
            ),
            Action::Dense(m) => Action::Dense(m * c(t)),
        };
        Self {
            domain: self.domain.clone(),
            codomain: self.codomain.clone(),
            action,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match &self.action {
            Action::Structural(terms) => serde_json::json!({
                "kind": "compress-conjugate-sum",
                "domain": self.domain.to_json(),
                "codomain": self.codomain.to_json(),
                "terms": terms.iter().map(|t| {
                    let mut window: Vec<usize> = t.left.blocks().map(|((_, j), _)| *j).collect();
                    window.sort_unstable();
                    window.dedup();
                    serde_json::json!({"left": t.left.to_json(), "window": window, "right": t.right.to_json()})
                }).collect::<Vec<_>>(),
            }),
            Action::Dense(m) => serde_json::json!({
                "kind": "dense",
                "domain": self.domain.to_json(),
                "codomain": self.codomain.to_json(),
                "matrix": (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect::<Vec<_>>()).collect::<Vec<_>>(),
            }),
        }
    }

    pub fn from_json(v: &serde_json::Value, space: Option<&Arc<FiniteMetricSpace>>) -> Result<Self> {
        let domain = AlgebraDesc::from_json(&v["domain"], space)?;
        let codomain = AlgebraDesc::from_json(&v["codomain"], space)?;
        match v["kind"].as_str() {
            Some("compress-conjugate-sum") => {
                let terms = v["terms"]
                    .as_array()
                    .ok_or_else(|| Error::InvalidParameter("terms missing".into()))?
                    .iter()
                    .map(|t| {
                        Ok(Term {
                            left: BlockMatrix::from_json(t["left"].clone())?,
                            right: BlockMatrix::from_json(t["right"].clone())?,
                        })
                    })
                    .collect::<Result<_>>()?;
                Self::structural(domain, codomain, terms)
            }
            Some("dense") => {
                let rows: Vec<Vec<[f64; 2]>> = serde_json::from_value(v["matrix"].clone())?;
                let nr = rows.len();
                let nc = rows.first().map_or(0, |r| r.len());
                let m = DMatrix::from_fn(nr, nc, |i, j| C::new(rows[i][j][0], rows[i][j][1]));
                Self::dense(domain, codomain, m)
            }
            other => Err(Error::InvalidParameter(format!("unknown map kind {other:?}"))),
        }
    }
}

/// Images of single-block elements `e_{s,t} (x) b` without a full product:
/// the columns of each left factor and rows of each right factor are
/// indexed once.
pub struct BlockApplier<'a> {
    map: &'a CpMap,
    cols: Vec<Vec<Vec<(usize, &'a Block)>>>,
    rows: Vec<Vec<Vec<(usize, &'a Block)>>>,
}

impl<'a> BlockApplier<'a> {
    pub fn new(map: &'a CpMap) -> Self {
        let n = map.domain.slots();
        let mut cols = Vec::new();
        let mut rows = Vec::new();
        if let Some(terms) = map.terms() {
            for t in terms {
                let mut tc: Vec<Vec<(usize, &Block)>> = vec![Vec::new(); n];
                for (&(i, s), b) in t.left.blocks() {
                    tc[s].push((i, b));
                }
                let mut tr: Vec<Vec<(usize, &Block)>> = vec![Vec::new(); n];
                for (&(s, j), b) in t.right.blocks() {
                    tr[s].push((j, b));
                }
                cols.push(tc);
                rows.push(tr);
            }
        }
        Self { map, cols, rows }
    }

    /// `φ(e_{s,t} (x) b)`.
    pub fn apply(&self, s: usize, t: usize, b: &Block) -> Result<BlockMatrix> {
        let (n, m) = (self.map.domain.slots(), self.map.domain.fiber());
        if s >= n || t >= n || b.shape() != (m, m) {
            return Err(Error::Incompatible(format!("generator ({s},{t}) does not fit the domain")));
        }
        let (no, mo) = (self.map.codomain.slots(), self.map.codomain.fiber());
        if self.map.terms().is_none() {
            return self.map.apply(&BlockMatrix::from_blocks(n, n, m, m, [((s, t), b.clone())]));
        }
        let mut out = BlockMatrix::zeros(no, no, mo, mo);
        for (tc, tr) in self.cols.iter().zip(&self.rows) {
            for &(i, l) in &tc[s] {
                let lb = l * b;
                for &(j, r) in &tr[t] {
                    out.insert(i, j, &lb * r);
                }
            }
        }
        out.prune();
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiReport {
    pub min_eigenvalue: f64,
    pub flag: bool,
    pub windows: usize,
}

/// Choi certificate on windows of `truncation` consecutive domain slots
/// (within one summand for finite-dimensional domains), overlapping by half.
/// Each Choi matrix is restricted to the output slots its images touch.
pub fn choi_check(phi: &CpMap, truncation: usize) -> Result<ChoiReport> {
    let m = phi.domain.fiber();
    if truncation == 0 {
        return Err(Error::InvalidParameter("truncation must be positive".into()));
    }
    if truncation * m > CHOI_MAX_COORDS {
        return Err(Error::SizeLimit(format!(
            "Choi window of {} coordinates exceeds {CHOI_MAX_COORDS}",
            truncation * m
        )));
    }
    let stride = (truncation / 2).max(1);
    let mut windows = Vec::new();
    for range in phi.domain.blocks_of_slots() {
        let mut s = range.start;
        loop {
            let e = (s + truncation).min(range.end);
            windows.push(s..e);
            if e == range.end {
                break;
            }
            s += stride;
        }
    }
    let mins: Vec<f64> = windows
        .par_iter()
        .map(|w| choi_window(phi, w.clone()))
        .collect::<Result<_>>()?;
    let min = mins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ChoiReport {
        min_eigenvalue: min,
        flag: min >= -CHOI_TOL,
        windows: windows.len(),
    })
}

fn choi_window(phi: &CpMap, w: Range<usize>) -> Result<f64> {
    let m = phi.domain.fiber();
    let mo = phi.codomain.fiber();
    let applier = BlockApplier::new(phi);
    let coords: Vec<(usize, usize)> = w.clone().flat_map(|s| (0..m).map(move |p| (s, p))).collect();
    let k = coords.len();
    let mut images = Vec::with_capacity(k * k);
    let mut out_slots = std::collections::BTreeSet::new();
    for &(sa, pa) in &coords {
        for &(sb, pb) in &coords {
            let img = applier.apply(sa, sb, &unit(m, pa, pb))?;
            for (&(i, j), _) in img.blocks() {
                out_slots.insert(i);
                out_slots.insert(j);
            }
            images.push(img);
        }
    }
    let outs: Vec<usize> = out_slots.into_iter().collect();
    if outs.is_empty() {
        return Ok(0.0);
    }
    let pos: std::collections::BTreeMap<usize, usize> = outs.iter().enumerate().map(|(a, &x)| (x, a)).collect();
    let dim_out = outs.len() * mo;
    let mut choi = DMatrix::<C>::zeros(k * dim_out, k * dim_out);
    for a in 0..k {
        for b in 0..k {
            for (&(i, j), blk) in images[a * k + b].blocks() {
                let r0 = a * dim_out + pos[&i] * mo;
                let c0 = b * dim_out + pos[&j] * mo;
                choi.view_mut((r0, c0), (mo, mo)).copy_from(blk);
            }
        }
    }
    let eig = BlockMatrix::from_dense(&choi, 1, 1).hermitian_eigen()?;
    let vals = eig.eigenvalues();
    // slots of the Choi matrix with no entries contribute eigenvalue 0
    let min = vals.iter().copied().fold(0.0, f64::min);
    Ok(min)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderZeroReport {
    pub pass: bool,
    pub worst: f64,
    /// True when the verdict comes from the structural certificate rather
    /// than sampling.
    pub certified: bool,
}

/// Structural certificate: every term is a conjugation `v a v*` with
/// `v* v = c P` for a central projection `P` of the domain, and distinct
/// terms have disjoint row supports. Then `φ(a)φ(b) = sum c v P ab v*`.
pub fn structural_order_zero(phi: &CpMap) -> bool {
    let Some(terms) = phi.terms() else {
        return false;
    };
    let mut owner = vec![usize::MAX; phi.codomain.slots()];
    for (ti, t) in terms.iter().enumerate() {
        if t.right != t.left.adjoint() {
            return false;
        }
        for (&(i, _), _) in t.left.blocks() {
            if owner[i] != usize::MAX && owner[i] != ti {
                return false;
            }
            owner[i] = ti;
        }
        let Ok(g) = t.left.adjoint().mul(&t.left) else {
            return false;
        };
        if !central_scalar_projection(&phi.domain, &g) {
            return false;
        }
    }
    true
}

fn central_scalar_projection(domain: &AlgebraDesc, g: &BlockMatrix) -> bool {
    if g.is_zero() {
        return true;
    }
    let m = domain.fiber();
    let Some(scalar) = g.blocks().next().map(|(_, b)| b[(0, 0)]) else {
        return true;
    };
    let want = Block::identity(m, m) * scalar;
    let exact = |b: &Block| (b - &want).iter().all(|z| z.norm() <= 1e-14 * scalar.norm().max(1.0));
    if g.off_diagonal_mass() != 0.0 || !g.blocks().all(|(_, b)| exact(b)) {
        return false;
    }
    // the slots carrying the scalar must be whole summands
    domain.blocks_of_slots().iter().all(|r| {
        let hit = r.clone().filter(|&s| g.get(s, s).is_some()).count();
        hit == 0 || hit == r.len()
    })
}

/// Order zero test: structural certificate when available, otherwise
/// `trials` sampled pairs of positives with disjoint spectral support.
pub fn order_zero_check(phi: &CpMap, trials: usize, seed: u64) -> Result<OrderZeroReport> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    if structural_order_zero(phi) {
        return Ok(OrderZeroReport {
            pass: true,
            worst: 0.0,
            certified: true,
        });
    }
    let scale = phi.apply(&phi.domain.unit())?.norm().powi(2).max(1.0);
    let worst = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let (a, b) = orthogonal_positive_pair(&phi.domain, &mut rng);
            let pa = phi.apply(&a)?;
            let pb = phi.apply(&b)?;
            Ok(pa.mul(&pb)?.norm())
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(OrderZeroReport {
        pass: worst <= ORDER_ZERO_TOL * scale,
        worst,
        certified: false,
    })
}

/// Unitary from the QR factorization of a random complex matrix.
pub fn random_unitary(rng: &mut impl Rng, n: usize) -> DMatrix<C> {
    let g = DMatrix::from_fn(n, n, |_, _| C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    g.qr().q()
}

const SAMPLE_WINDOW: usize = 64;

/// Two positive contractions supported on complementary spectral subspaces
/// of a random unitary, inside a random window of one summand.
fn orthogonal_positive_pair(dom: &AlgebraDesc, rng: &mut impl Rng) -> (BlockMatrix, BlockMatrix) {
    let m = dom.fiber();
    let ranges = dom.blocks_of_slots();
    let r = ranges[rng.gen_range(0..ranges.len())].clone();
    let slots = (SAMPLE_WINDOW / m).max(1).min(r.len());
    let start = r.start + rng.gen_range(0..=r.len() - slots);
    let dim = slots * m;
    let u = random_unitary(rng, dim);
    let side: Vec<bool> = (0..dim).map(|_| rng.gen_bool(0.5)).collect();
    let make = |which: bool, rng: &mut dyn rand::RngCore| {
        let lam = DVector::from_fn(dim, |i, _| {
            if side[i] == which {
                c(rng.gen_range(0.1..1.0))
            } else {
                c(0.0)
            }
        });
        let d = &u * DMatrix::from_diagonal(&lam) * u.adjoint();
        BlockMatrix::from_dense(&d, m, m).embed(dom.slots(), dom.slots(), start, start)
    };
    let a = make(true, rng);
    let b = make(false, rng);
    (a, b)
}

/// `φ = h π` with `h = φ(1)` and `π(a) = h⁺ φ(a)`.
#[derive(Clone, Debug)]
pub struct OrderZeroFactorization {
    pub phi: CpMap,
    pub h: BlockMatrix,
    pub h_pinv: BlockMatrix,
    pub support: BlockMatrix,
    pub pi: CpMap,
    pub residual: f64,
    pub commutator: f64,
    pub multiplicativity: f64,
}

/// Factorizes an order zero map and checks the identities on a seeded
/// sample of generator pairs (plus the unit).
pub fn factorize_order_zero(phi: &CpMap) -> Result<OrderZeroFactorization> {
    factorize_order_zero_seeded(phi, 0x5EED)
}

pub fn factorize_order_zero_seeded(phi: &CpMap, seed: u64) -> Result<OrderZeroFactorization> {
    let h = phi.apply(&phi.domain.unit())?;
    let eig = h.hermitian_eigen()?;
    let cut = PINV_REL * eig.max_abs();
    let h_pinv = eig.apply(|l| if l.abs() <= cut { 0.0 } else { 1.0 / l });
    let support = eig.apply(|l| if l.abs() <= cut { 0.0 } else { 1.0 });
    let one = phi.codomain.unit();
    let pi = phi.with_output_factors(&h_pinv, &one)?;
    let mut fac = OrderZeroFactorization {
        phi: phi.clone(),
        h,
        h_pinv,
        support,
        pi,
        residual: 0.0,
        commutator: 0.0,
        multiplicativity: 0.0,
    };
    let (res, com, mult, star) = fac.measure(FACTOR_SAMPLES, seed)?;
    fac.residual = res;
    fac.commutator = com;
    fac.multiplicativity = mult;
    for (name, dev) in [
        ("phi(a) = h pi(a)", res),
        ("h pi(a) = pi(a) h", com),
        ("pi(ab) = pi(a) pi(b)", mult),
        ("pi(a*) = pi(a)*", star),
    ] {
        if !(dev <= FACTOR_TOL) {
            return Err(Error::FactorizationInvalid {
                identity: name.into(),
                deviation: dev,
            });
        }
    }
    Ok(fac)
}

/// Random generator `e_{s,t} (x) E_pq`, optionally chained to `prev`.
fn random_generator(dom: &AlgebraDesc, rng: &mut impl Rng, after: Option<(usize, usize)>) -> (BlockMatrix, (usize, usize)) {
    let m = dom.fiber();
    let n = dom.slots();
    let (s, p) = match after {
        Some(x) if rng.gen_bool(0.75) => x,
        _ => (rng.gen_range(0..n), rng.gen_range(0..m)),
    };
    let range = dom
        .blocks_of_slots()
        .into_iter()
        .find(|r| r.contains(&s))
        .expect("slot in some summand");
    let t = rng.gen_range(range);
    let q = rng.gen_range(0..m);
    (
        BlockMatrix::from_blocks(n, n, m, m, [((s, t), unit(m, p, q))]),
        (t, q),
    )
}

impl OrderZeroFactorization {
    /// Worst deviations over sampled generators: residual, commutator with
    /// `h`, multiplicativity and adjoint preservation of `π`.
    pub fn measure(&self, samples: usize, seed: u64) -> Result<(f64, f64, f64, f64)> {
        let dom = &self.phi.domain;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = vec![(dom.unit(), dom.unit())];
        for _ in 0..samples {
            let (a, end) = random_generator(dom, &mut rng, None);
            let (b, _) = random_generator(dom, &mut rng, Some(end));
            pairs.push((a, b));
        }
        let devs: Vec<(f64, f64, f64, f64)> = pairs
            .par_iter()
            .map(|(a, b)| {
                let pa = self.pi.apply(a)?;
                let pb = self.pi.apply(b)?;
                let fa = self.phi.apply(a)?;
                let res = fa.dist(&self.h.mul(&pa)?)?;
                let com = self.h.mul(&pa)?.dist(&pa.mul(&self.h)?)?;
                let mult = self.pi.apply(&a.mul(b)?)?.dist(&pa.mul(&pb)?)?;
                let star = self.pi.apply(&a.adjoint())?.dist(&pa.adjoint())?;
                Ok((res, com, mult, star))
            })
            .collect::<Result<_>>()?;
        Ok(devs.iter().fold((0.0, 0.0, 0.0, 0.0), |acc, d| {
            (acc.0.max(d.0), acc.1.max(d.1), acc.2.max(d.2), acc.3.max(d.3))
        }))
    }

    /// The map `a ↦ h π(a)` rebuilt from the factorization.
    pub fn rebuild(&self) -> Result<CpMap> {
        self.pi.with_output_factors(&self.h, &self.phi.codomain.unit())
    }
}

/// `f(φ)(a) = f(h) π(a)` for `f` with `f(0) = 0`.
pub fn functional_calculus(f: impl Fn(f64) -> f64 + Sync, fac: &OrderZeroFactorization) -> Result<CpMap> {
    let f0 = f(0.0);
    if f0 != 0.0 {
        return Err(Error::InvalidFunction(format!("f(0) = {f0}, expected 0")));
    }
    let eig = fac.h.hermitian_eigen()?;
    let cut = PINV_REL * eig.max_abs();
    let g = eig.apply(|l| if l.abs() <= cut { 0.0 } else { f(l) / l });
    fac.phi.with_output_factors(&g, &fac.phi.codomain.unit())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BumpKind {
    FDelta,
    GDelta,
    Zeta,
    ZetaPrime,
}

/// The piecewise functions used to threshold and renormalize witnesses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bump {
    pub kind: BumpKind,
    delta: f64,
    /// Below this point `ζ` is constant.
    knee: f64,
}

impl Bump {
    /// 0 on `[0, δ]`, linear from 0 to `2δ` on `[δ, 2δ]`, identity after.
    pub fn f_delta(delta: f64) -> Result<Self> {
        check_delta(delta)?;
        Ok(Self {
            kind: BumpKind::FDelta,
            delta,
            knee: 0.0,
        })
    }

    /// 0 on `[0, δ/2]`, linear to 1 on `[δ/2, δ]`, 1 after.
    pub fn g_delta(delta: f64) -> Result<Self> {
        check_delta(delta)?;
        Ok(Self {
            kind: BumpKind::GDelta,
            delta,
            knee: 0.0,
        })
    }

    /// `sqrt(max(z, ε²/(81·2(d+1))))`.
    pub fn zeta(d: usize, eps: f64) -> Result<Self> {
        Self::zeta_kind(BumpKind::Zeta, d, eps)
    }

    pub fn zeta_prime(d: usize, eps: f64) -> Result<Self> {
        Self::zeta_kind(BumpKind::ZetaPrime, d, eps)
    }

    fn zeta_kind(kind: BumpKind, d: usize, eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::InvalidParameter(format!("epsilon {eps} must be positive")));
        }
        Ok(Self {
            kind,
            delta: 0.0,
            knee: eps * eps / (81.0 * 2.0 * (d as f64 + 1.0)),
        })
    }

    pub fn knee(&self) -> f64 {
        self.knee
    }

    pub fn eval(&self, z: f64) -> f64 {
        let d = self.delta;
        match self.kind {
            BumpKind::FDelta => {
                if z <= d {
                    0.0
                } else if z <= 2.0 * d {
                    2.0 * (z - d)
                } else {
                    z
                }
            }
            BumpKind::GDelta => {
                if z <= d / 2.0 {
                    0.0
                } else if z < d {
                    2.0 * z / d - 1.0
                } else {
                    1.0
                }
            }
            BumpKind::Zeta => z.max(self.knee).sqrt(),
            BumpKind::ZetaPrime => 1.0 / z.max(self.knee).sqrt(),
        }
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(Error::InvalidParameter(format!("delta {delta} must lie in (0, 1/2)")));
    }
    Ok(())
}

/// Uniform constructor: `δ` must lie in `(0, 1/2)` for every kind; `d` and
/// `ε` only matter for `ζ` and `ζ'`.
pub fn bump_functions(delta: f64, kind: BumpKind, d: usize, eps: f64) -> Result<Bump> {
    check_delta(delta)?;
    match kind {
        BumpKind::FDelta => Bump::f_delta(delta),
        BumpKind::GDelta => Bump::g_delta(delta),
        BumpKind::Zeta => Bump::zeta(d, eps),
        BumpKind::ZetaPrime => Bump::zeta_prime(d, eps),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopReport {
    pub pass: bool,
    pub worst: f64,
}

/// Commutation property: `π(e_ss (x) 1)` commutes with every diagonal
/// generator `1_x (x) E_pq` of the band codomain. Only points in the support
/// of `π(e_ss (x) 1)` can give a nonzero commutator.
pub fn cop_check(fac: &OrderZeroFactorization, tol: f64) -> Result<CopReport> {
    if !matches!(fac.pi.codomain, AlgebraDesc::Band { .. }) {
        return Err(Error::Precondition("the commutation property needs a band codomain".into()));
    }
    let dom = &fac.pi.domain;
    let (n, m) = (dom.slots(), dom.fiber());
    let (no, mo) = (fac.pi.codomain.slots(), fac.pi.codomain.fiber());
    let worst = (0..n)
        .into_par_iter()
        .map(|s| {
            let v = BlockMatrix::from_blocks(n, n, m, m, [((s, s), Block::identity(m, m))]);
            let p = fac.pi.apply(&v)?;
            let mut pts: Vec<usize> = p.blocks().flat_map(|((i, j), _)| [*i, *j]).collect();
            pts.sort_unstable();
            pts.dedup();
            let mut worst: f64 = 0.0;
            for &x in &pts {
                for a in 0..mo {
                    for b in 0..mo {
                        let d = BlockMatrix::from_blocks(no, no, mo, mo, [((x, x), unit(mo, a, b))]);
                        worst = worst.max(p.mul(&d)?.dist(&d.mul(&p)?)?);
                    }
                }
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(CopReport {
        pass: worst <= tol,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{generate_space, GridSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn mat_alg(n: usize, m: usize) -> AlgebraDesc {
        AlgebraDesc::Fd(FiniteDimAlgebra::new(vec![n], m).unwrap())
    }

    fn transpose_map(n: usize) -> CpMap {
        let d = n * n;
        let mut t = DMatrix::zeros(d, d);
        for i in 0..n {
            for j in 0..n {
                t[(j * n + i, i * n + j)] = c(1.0);
            }
        }
        CpMap::dense(mat_alg(n, 1), mat_alg(n, 1), t).unwrap()
    }

    #[test]
    fn choi_of_identity_and_transpose() {
        let id = CpMap::identity(mat_alg(2, 1));
        let r = choi_check(&id, 2).unwrap();
        assert!(r.flag);
        assert!(r.min_eigenvalue.abs() < 1e-12);
        let t = choi_check(&transpose_map(2), 2).unwrap();
        assert!(!t.flag);
        assert!((t.min_eigenvalue + 1.0).abs() < 1e-12);
    }

    #[test]
    fn choi_window_cap() {
        let id = CpMap::identity(mat_alg(2, 1));
        assert!(matches!(choi_check(&id, 513), Err(Error::SizeLimit(_))));
    }

    #[test]
    fn conjugation_sums_are_cp() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let terms = (0..3)
            .map(|_| {
                let v = BlockMatrix::from_dense(
                    &DMatrix::from_fn(3, 3, |_, _| C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))),
                    1,
                    1,
                );
                Term::conjugation(v)
            })
            .collect();
        let phi = CpMap::structural(mat_alg(3, 1), mat_alg(3, 1), terms).unwrap();
        assert!(choi_check(&phi, 3).unwrap().flag);
        // the dense form agrees with the structural one
        let dense = CpMap::dense(mat_alg(3, 1), mat_alg(3, 1), phi.to_dense()).unwrap();
        let a = BlockMatrix::from_dense(&DMatrix::from_fn(3, 3, |i, j| C::new(i as f64, j as f64)), 1, 1);
        assert!(phi.apply(&a).unwrap().dist(&dense.apply(&a).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn homomorphisms_are_order_zero() {
        let id = CpMap::identity(mat_alg(2, 2));
        let r = order_zero_check(&id, 20, 1).unwrap();
        assert!(r.pass && r.certified && r.worst == 0.0);
    }

    #[test]
    fn conjugation_by_full_support_positive_is_not_order_zero() {
        let h = BlockMatrix::from_dense(
            &DMatrix::from_row_slice(2, 2, &[c(1.0), c(0.5), c(0.5), c(1.0)]),
            1,
            1,
        );
        let phi = CpMap::structural(mat_alg(2, 1), mat_alg(2, 1), vec![Term { left: h.clone(), right: h }]).unwrap();
        let r = order_zero_check(&phi, 50, 3).unwrap();
        assert!(!r.certified);
        assert!(!r.pass);
        assert!(r.worst > 1e-3);
    }

    #[test]
    fn factorization_examples() {
        let id = CpMap::identity(mat_alg(2, 1));
        let f = factorize_order_zero(&id).unwrap();
        assert_eq!(f.h, BlockMatrix::identity(2, 1));

        let t = 0.3;
        let scaled = id.scale(t);
        let f = factorize_order_zero(&scaled).unwrap();
        assert!(f.h.dist(&BlockMatrix::identity(2, 1).scale_real(t)).unwrap() < 1e-15);
        let a = BlockMatrix::from_dense(&DMatrix::from_fn(2, 2, |i, j| C::new(1.0 + i as f64, j as f64)), 1, 1);
        assert!(f.pi.apply(&a).unwrap().dist(&a).unwrap() < 1e-14);
        assert!(f.rebuild().unwrap().apply(&a).unwrap().dist(&scaled.apply(&a).unwrap()).unwrap() < 1e-14);
    }

    #[test]
    fn non_order_zero_maps_do_not_factor() {
        let h = BlockMatrix::from_dense(
            &DMatrix::from_row_slice(2, 2, &[c(1.0), c(0.5), c(0.5), c(1.0)]),
            1,
            1,
        );
        let phi = CpMap::structural(mat_alg(2, 1), mat_alg(2, 1), vec![Term { left: h.clone(), right: h }]).unwrap();
        assert!(matches!(factorize_order_zero(&phi), Err(Error::FactorizationInvalid { .. })));
    }

    /// `a ↦ h a` on a commutative direct sum of copies of `C`.
    fn diag_scaled_identity(vals: &[f64]) -> CpMap {
        let h = BlockMatrix::scalar_diagonal(vals, 1);
        let n = vals.len();
        let dom = AlgebraDesc::Fd(FiniteDimAlgebra::new(vec![1; n], 1).unwrap());
        CpMap::structural(dom.clone(), dom, vec![Term { left: h, right: BlockMatrix::identity(n, 1) }]).unwrap()
    }

    #[test]
    fn functional_calculus_examples() {
        let phi = diag_scaled_identity(&[1.0, 0.5]);
        let fac = factorize_order_zero(&phi).unwrap();
        let same = functional_calculus(|z| z, &fac).unwrap();
        let one = BlockMatrix::identity(2, 1);
        assert!(same.apply(&one).unwrap().dist(&phi.apply(&one).unwrap()).unwrap() < 1e-12);
        let sq = functional_calculus(|z| z * z, &fac).unwrap();
        let want = BlockMatrix::scalar_diagonal(&[1.0, 0.25], 1);
        assert!(sq.apply(&one).unwrap().dist(&want).unwrap() < 1e-12);
        assert!(matches!(functional_calculus(|z| z + 1.0, &fac), Err(Error::InvalidFunction(_))));
        let fd = Bump::f_delta(0.2).unwrap();
        let g = functional_calculus(|z| fd.eval(z), &fac).unwrap();
        assert!(order_zero_check(&g, 50, 9).unwrap().pass);
    }

    #[test]
    fn bump_values() {
        let d = 0.1;
        let f = Bump::f_delta(d).unwrap();
        assert_eq!(f.eval(d), 0.0);
        assert_eq!(f.eval(2.0 * d), 2.0 * d);
        assert_eq!(f.eval(1.0), 1.0);
        let g = Bump::g_delta(d).unwrap();
        assert_eq!(g.eval(d / 2.0), 0.0);
        assert_eq!(g.eval(d), 1.0);
        assert!(Bump::f_delta(0.5).is_err());
        assert!(Bump::g_delta(0.0).is_err());
        assert!(bump_functions(0.7, BumpKind::Zeta, 0, 0.1).is_err());
        let z = Bump::zeta(1, 0.3).unwrap();
        let zp = Bump::zeta_prime(1, 0.3).unwrap();
        for k in 0..=1000 {
            let t = k as f64 / 1000.0;
            assert!((z.eval(t) * zp.eval(t) - 1.0).abs() < 1e-12);
        }
        let floor = 0.3 / (9.0 * (2.0f64 * 2.0).sqrt());
        assert!((z.eval(0.0) - floor).abs() < 1e-15);
        assert!((z.eval(z.knee()) - floor).abs() < 1e-15);
    }

    #[test]
    fn f_times_g_is_f() {
        for delta in [0.01, 0.1, 0.3, 0.49] {
            let f = Bump::f_delta(delta).unwrap();
            let g = Bump::g_delta(delta).unwrap();
            for k in 0..=10_000 {
                let t = k as f64 / 10_000.0;
                assert_eq!(f.eval(t) * g.eval(t), f.eval(t));
            }
        }
    }

    /// `π(T) = v T v*` at every point of a small space, with `v` the unitary
    /// gluing two copies of `C^k` into `C^{2k}`.
    fn glued_isometries(points: usize, k: usize) -> CpMap {
        let space = Arc::new(generate_space(&GridSpec::interval(points)).unwrap());
        let dom = AlgebraDesc::Fd(FiniteDimAlgebra::new(vec![2], k).unwrap());
        let cod = AlgebraDesc::Band { space, fiber: 2 * k };
        let mut v1 = DMatrix::<C>::zeros(2 * k, k);
        let mut v2 = DMatrix::<C>::zeros(2 * k, k);
        for i in 0..k {
            v1[(i, i)] = c(1.0);
            v2[(k + i, i)] = c(1.0);
        }
        let terms = (0..points)
            .map(|x| {
                let l = BlockMatrix::from_blocks(points, 2, 2 * k, k, [((x, 0), v1.clone()), ((x, 1), v2.clone())]);
                Term::conjugation(l)
            })
            .collect();
        CpMap::structural(dom, cod, terms).unwrap()
    }

    #[test]
    fn glued_isometries_fail_commutation() {
        let pi = glued_isometries(3, 2);
        let fac = factorize_order_zero(&pi).unwrap();
        let r = cop_check(&fac, 1e-9).unwrap();
        assert!(!r.pass);
        assert!(r.worst >= 1.0 - 1e-12);
    }

    #[test]
    fn disjoint_projections_pass_commutation() {
        let space = Arc::new(generate_space(&GridSpec::interval(4)).unwrap());
        let dom = AlgebraDesc::Fd(FiniteDimAlgebra::new(vec![2], 1).unwrap());
        let cod = AlgebraDesc::Band { space, fiber: 1 };
        // e_11 ↦ 1_{0,1}, e_22 ↦ 1_{2,3}
        let l = BlockMatrix::from_blocks(
            4,
            2,
            1,
            1,
            [((0, 0), unit(1, 0, 0)), ((2, 1), unit(1, 0, 0))],
        );
        let l2 = BlockMatrix::from_blocks(
            4,
            2,
            1,
            1,
            [((1, 0), unit(1, 0, 0)), ((3, 1), unit(1, 0, 0))],
        );
        let pi = CpMap::structural(dom, cod, vec![Term::conjugation(l), Term::conjugation(l2)]).unwrap();
        let fac = factorize_order_zero(&pi).unwrap();
        let r = cop_check(&fac, 1e-12).unwrap();
        assert!(r.pass);
        assert_eq!(r.worst, 0.0);
    }

    #[test]
    fn cp_map_json_round_trip() {
        let pi = glued_isometries(2, 1);
        let space = match &pi.codomain {
            AlgebraDesc::Band { space, .. } => space.clone(),
            _ => unreachable!(),
        };
        let back = CpMap::from_json(&pi.to_json(), Some(&space)).unwrap();
        assert_eq!(back, pi);
        let t = transpose_map(2);
        assert_eq!(CpMap::from_json(&t.to_json(), None).unwrap(), t);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn cop_invariant_under_fiber_unitaries(seed in any::<u64>(), k in 1usize..3) {
            let pi = glued_isometries(2, k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_unitary(&mut rng, k);
            let u = BlockMatrix::diagonal(2, k, |_| Some(w.clone()));
            let twisted = pi.with_input_factors(pi.domain.clone(), &u, &u.adjoint()).unwrap();
            let a = cop_check(&factorize_order_zero(&pi).unwrap(), 1e-9).unwrap();
            let b = cop_check(&factorize_order_zero(&twisted).unwrap(), 1e-9).unwrap();
            prop_assert_eq!(a.pass, b.pass);
            prop_assert!((a.worst - b.worst).abs() < 1e-9);
        }

        #[test]
        fn calculus_with_small_sup_norm_is_contractive(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let fac = factorize_order_zero(&diag_scaled_identity(&vals)).unwrap();
            let f = Bump::f_delta(0.2).unwrap();
            let g = functional_calculus(|z| f.eval(z), &fac).unwrap();
            prop_assert!(g.apply(&BlockMatrix::identity(4, 1)).unwrap().norm() <= 1.0 + 1e-12);
        }
    }
}
