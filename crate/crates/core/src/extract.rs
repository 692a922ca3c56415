//! From a witness back to a cover: partial-bijection decomposition of the
//! neighbor relation, spectral thresholding of `ψ(1)`, the partial
//! translations read off the order zero data, and the resulting colored
//! cover with its class bound.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cover::{verify_cover, ColoredCover, CoverReport};
use crate::cpmaps::{factorize_order_zero, BlockApplier, Bump};
use crate::dsu::DisjointSet;
use crate::error::{Error, Result};
use crate::operator::{BandOperator, Block, BlockMatrix, PINV_REL};
use crate::space::{FiniteMetricSpace, Scale};
use crate::witness::DiagDimWitness;

/// Eigenvalues within this distance of the threshold count as below it.
pub const THRESHOLD_SLACK: f64 = 1e-9;
/// Relative residual mass tolerated when reading off a support point.
pub const SUPPORT_RESIDUAL: f64 = 1e-6;
pub const IDENTITY_TOL: f64 = 1e-8;
/// Slot-diagonality tolerance for `ψ(1)`.
const DIAGONAL_TOL: f64 = 1e-9;

/// The neighbor pairs `{(x, y) : dist(x, y) <= r}` split into parts on which
/// both coordinate projections are injective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeDecomposition {
    pub r: f64,
    pub parts: Vec<Vec<(usize, usize)>>,
}

impl EdgeDecomposition {
    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.parts.iter().map(Vec::len).sum()
    }

    /// Within every part, first coordinates are distinct and second
    /// coordinates are distinct.
    pub fn injective(&self) -> bool {
        self.parts.iter().all(|p| {
            let mut a: Vec<usize> = p.iter().map(|e| e.0).collect();
            let mut b: Vec<usize> = p.iter().map(|e| e.1).collect();
            a.sort_unstable();
            b.sort_unstable();
            let n = a.len();
            a.dedup();
            b.dedup();
            a.len() == n && b.len() == n
        })
    }

    /// Partial translations with identity fiber blocks on each part.
    pub fn translations(&self, space: Arc<FiniteMetricSpace>, m: usize) -> Vec<BandOperator> {
        self.parts
            .iter()
            .map(|p| BandOperator::partial_translation(space.clone(), m, p))
            .collect()
    }
}

/// Greedy edge coloring: pairs in lexicographic order go to the first part
/// where neither coordinate is taken. Uses at most `2N(r) - 1` parts.
pub fn decompose_neighbors(space: &FiniteMetricSpace, r: f64) -> Result<EdgeDecomposition> {
    if !(r >= 0.0) {
        return Err(Error::InvalidParameter(format!("scale {r} must be nonnegative")));
    }
    let n = space.len();
    let s = Scale::new(r);
    let mut parts: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut used_first: Vec<Vec<bool>> = Vec::new();
    let mut used_second: Vec<Vec<bool>> = Vec::new();
    for x in 0..n {
        for y in 0..n {
            if !space.within(x, y, &s) {
                continue;
            }
            let k = (0..parts.len())
                .find(|&k| !used_first[k][x] && !used_second[k][y])
                .unwrap_or_else(|| {
                    parts.push(Vec::new());
                    used_first.push(vec![false; n]);
                    used_second.push(vec![false; n]);
                    parts.len() - 1
                });
            parts[k].push((x, y));
            used_first[k][x] = true;
            used_second[k][y] = true;
        }
    }
    Ok(EdgeDecomposition { r, parts })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub delta: f64,
    pub eta: f64,
    pub eps: f64,
}

/// `δ = 1/(2⁷(d+1)²)`, `η = 1/(2³(d+1))`, `ε = δ³/4`.
pub fn constants(d: usize) -> Constants {
    let k = (d + 1) as f64;
    let delta = 1.0 / (128.0 * k * k);
    Constants {
        delta,
        eta: 1.0 / (8.0 * k),
        eps: delta * delta * delta / 4.0,
    }
}

/// A summand of `F` cut down to the slots where `ψ(1)` exceeds `δ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corner {
    pub color: usize,
    pub summand: usize,
    /// Absolute slots of `F`, ascending.
    pub slots: Vec<usize>,
}

impl Corner {
    pub fn size(&self) -> usize {
        self.slots.len()
    }
}

#[derive(Clone, Debug)]
pub struct ThresholdData {
    pub d: usize,
    pub constants: Constants,
    /// Spectral projection of `ψ(1)` onto `(δ, 1]`.
    pub qhat: BlockMatrix,
    /// `qhat` with every nonzero slot promoted to the full fiber unit.
    pub q: BlockMatrix,
    pub corners: Vec<Corner>,
}

impl ThresholdData {
    /// Number of corners of each color.
    pub fn corners_per_color(&self) -> Vec<usize> {
        let mut out = vec![0; self.d + 1];
        for c in &self.corners {
            out[c.color] += 1;
        }
        out
    }

    pub fn s_max(&self) -> usize {
        self.corners.iter().map(Corner::size).max().unwrap_or(0)
    }
}

/// `χ_(δ,1]` of a Hermitian element; eigenvalues within
/// [`THRESHOLD_SLACK`] of `δ` are left out.
pub fn spectral_threshold(a: &BlockMatrix, delta: f64) -> Result<BlockMatrix> {
    let eig = a.hermitian_eigen()?;
    Ok(eig.apply(|l| {
        if l > delta + THRESHOLD_SLACK && l <= 1.0 + THRESHOLD_SLACK {
            1.0
        } else {
            0.0
        }
    }))
}

pub fn threshold_setup(w: &DiagDimWitness) -> Result<ThresholdData> {
    let consts = constants(w.d);
    let one = w.psi_one()?;
    let off = one.off_diagonal_mass();
    if off > DIAGONAL_TOL * one.norm().max(1.0) {
        return Err(Error::Condition4Violation(off));
    }
    let qhat = spectral_threshold(&one, consts.delta)?;
    let m = w.fiber();
    let slots = w.algebra.slots();
    let kept: Vec<usize> = (0..slots).filter(|&s| qhat.get(s, s).is_some()).collect();
    let q = BlockMatrix::projection(slots, m, &kept);
    let corners = (0..w.algebra.summand_sizes.len())
        .filter_map(|k| {
            let range = w.algebra.summand_range(k);
            let slots: Vec<usize> = kept.iter().copied().filter(|s| range.contains(s)).collect();
            (!slots.is_empty()).then(|| Corner {
                color: w.summand_colors[k],
                summand: k,
                slots,
            })
        })
        .collect();
    Ok(ThresholdData {
        d: w.d,
        constants: consts,
        qhat,
        q,
        corners,
    })
}

/// Order zero data of one corner: `f_{k,l} = f_δ(φ_c)(e_{k,l} (x) 1)`,
/// `g_{k,l}` likewise, the sets `U_k` and the bijections `σ̄_{k,l}`.
#[derive(Clone, Debug)]
pub struct CornerSystem {
    pub corner: Corner,
    pub f: Vec<Vec<BlockMatrix>>,
    pub g: Vec<Vec<BlockMatrix>>,
    pub sets: Vec<Vec<usize>>,
    /// `sigma[k][l]` maps `U_k` into `U_l`.
    pub sigma: Vec<Vec<BTreeMap<usize, usize>>>,
}

#[derive(Clone, Debug)]
pub struct PartialTranslationSystem {
    pub d: usize,
    pub constants: Constants,
    pub corners: Vec<CornerSystem>,
    /// Norms within [`THRESHOLD_SLACK`] of `η²`, as `(corner, k, point)`.
    pub borderline: Vec<(usize, usize, usize)>,
    /// Points `x` with `σ̄_{l,k}(σ̄_{k,l}(x)) != x`, as `(corner, k, l, x)`.
    pub round_trip_failures: Vec<(usize, usize, usize, usize)>,
    pub points: usize,
}

impl PartialTranslationSystem {
    pub fn round_trip_ok(&self) -> bool {
        self.round_trip_failures.is_empty()
    }

    pub fn s_max(&self) -> usize {
        self.corners.iter().map(|c| c.corner.size()).max().unwrap_or(0)
    }
}

fn column_norm_sq(a: &BlockMatrix, x: usize) -> f64 {
    let col: Vec<(usize, Block)> = a
        .blocks()
        .filter(|((_, j), _)| *j == x)
        .map(|((i, _), b)| (*i, b.clone()))
        .collect();
    if col.is_empty() {
        return 0.0;
    }
    let cf = a.col_fiber();
    let mut stacked = Block::zeros(col.len() * a.row_fiber(), cf);
    for (k, (_, b)) in col.iter().enumerate() {
        stacked.view_mut((k * a.row_fiber(), 0), (a.row_fiber(), cf)).copy_from(b);
    }
    let n = stacked.singular_values().max();
    n * n
}

pub fn build_translation_system(w: &DiagDimWitness, td: &ThresholdData) -> Result<PartialTranslationSystem> {
    let consts = td.constants;
    let eta_sq = consts.eta * consts.eta;
    let fd = Bump::f_delta(consts.delta)?;
    let gd = Bump::g_delta(consts.delta)?;
    let m = w.fiber();
    let n = w.space.len();
    struct Built {
        sys: CornerSystem,
        borderline: Vec<(usize, usize)>,
    }
    let built: Vec<Built> = td
        .corners
        .par_iter()
        .enumerate()
        .map(|(ci, corner)| {
            let s = corner.size();
            let phi_c = w.phi.restrict_domain(&corner.slots, vec![s])?;
            let fac = factorize_order_zero(&phi_c)?;
            let eig = fac.h.hermitian_eigen()?;
            let cut = PINV_REL * eig.max_abs();
            let gf = eig.apply(|l| if l.abs() <= cut { 0.0 } else { fd.eval(l) / l });
            let gg = eig.apply(|l| if l.abs() <= cut { 0.0 } else { gd.eval(l) / l });
            let app = BlockApplier::new(&phi_c);
            let id = Block::identity(m, m);
            let mut f = vec![Vec::with_capacity(s); s];
            let mut g = vec![Vec::with_capacity(s); s];
            for k in 0..s {
                for l in 0..s {
                    let img = app.apply(k, l, &id)?;
                    f[k].push(gf.mul(&img)?);
                    g[k].push(gg.mul(&img)?);
                }
            }
            let mut sets = Vec::with_capacity(s);
            let mut borderline = Vec::new();
            for (k, fk) in f.iter().enumerate() {
                let mut cols: Vec<usize> = fk[k].blocks().map(|((_, j), _)| *j).collect();
                cols.sort_unstable();
                cols.dedup();
                let mut u = Vec::new();
                for x in cols {
                    // ‖f 1_x f‖ = ‖f 1_x‖² for Hermitian f
                    let v = column_norm_sq(&fk[k], x);
                    if (v - eta_sq).abs() <= THRESHOLD_SLACK {
                        borderline.push((k, x));
                    }
                    if v > eta_sq {
                        u.push(x);
                    }
                }
                sets.push(u);
            }
            let mut sigma = vec![vec![BTreeMap::new(); s]; s];
            for k in 0..s {
                for &x in &sets[k] {
                    let px = BlockMatrix::projection(n, m, &[x]);
                    let a = BlockMatrix::chain(&[&f[k][k], &px, &f[k][k]])?;
                    for l in 0..s {
                        let b = BlockMatrix::chain(&[&g[l][k], &a, &g[l][k].adjoint()])?;
                        let y = support_point(&b).map_err(|residual| Error::AmbiguousSupport {
                            color: corner.color,
                            corner: ci,
                            k,
                            l,
                            point: w.space.id(x).to_string(),
                            residual,
                        })?;
                        sigma[k][l].insert(x, y);
                    }
                }
            }
            Ok(Built {
                sys: CornerSystem {
                    corner: corner.clone(),
                    f,
                    g,
                    sets,
                    sigma,
                },
                borderline,
            })
        })
        .collect::<Result<_>>()?;
    let mut corners = Vec::with_capacity(built.len());
    let mut borderline = Vec::new();
    let mut round_trip_failures = Vec::new();
    for (ci, b) in built.into_iter().enumerate() {
        borderline.extend(b.borderline.iter().map(|&(k, x)| (ci, k, x)));
        let sys = b.sys;
        let s = sys.corner.size();
        for k in 0..s {
            for l in 0..s {
                for (&x, y) in &sys.sigma[k][l] {
                    if sys.sigma[l][k].get(y) != Some(&x) {
                        round_trip_failures.push((ci, k, l, x));
                    }
                }
            }
        }
        corners.push(sys);
    }
    Ok(PartialTranslationSystem {
        d: td.d,
        constants: consts,
        corners,
        borderline,
        round_trip_failures,
        points: n,
    })
}

/// The diagonal slot carrying the largest block; errors with the relative
/// residual mass when the rest is not negligible.
fn support_point(b: &BlockMatrix) -> std::result::Result<usize, f64> {
    let mut total = 0.0;
    let mut best = (usize::MAX, 0.0);
    for ((i, j), blk) in b.blocks() {
        let mass: f64 = blk.iter().map(|z| z.norm_sqr()).sum();
        total += mass;
        if i == j && mass > best.1 {
            best = (*i, mass);
        }
    }
    if best.0 == usize::MAX {
        return Err(f64::NAN);
    }
    let residual = (total - best.1) / total;
    if residual > SUPPORT_RESIDUAL {
        return Err(residual);
    }
    Ok(best.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    /// Worst deviation of identities (i) through (v).
    pub worst: [f64; 5],
    pub pass: bool,
}

fn diff_norm(a: &BlockMatrix, b: &BlockMatrix) -> Result<f64> {
    let d = a.sub(b)?;
    Ok(if d.is_zero() { 0.0 } else { d.norm() })
}

/// Distance of a square element from the positive part of the diagonal.
fn positive_diagonal_defect(a: &BlockMatrix) -> Result<f64> {
    let herm = diff_norm(a, &a.adjoint())?;
    let off = a.off_diagonal_mass();
    let (lo, _) = a.spectrum_bounds()?;
    Ok(herm.max(off).max((-lo).max(0.0)))
}

/// (i) `f_kk` diagonal and positive, (ii) the same for `g_kk`,
/// (iii) `f_kl* = f_lk`, (iv) `g_kl* = g_lk`,
/// (v) `f_kl g_lm = f_km = g_kl f_lm`.
pub fn matrix_unit_identities(pts: &PartialTranslationSystem, tol: f64) -> Result<IdentityReport> {
    let per: Vec<[f64; 5]> = pts
        .corners
        .par_iter()
        .map(|c| {
            let s = c.corner.size();
            let mut w = [0.0f64; 5];
            for k in 0..s {
                w[0] = w[0].max(positive_diagonal_defect(&c.f[k][k])?);
                w[1] = w[1].max(positive_diagonal_defect(&c.g[k][k])?);
                for l in 0..s {
                    w[2] = w[2].max(diff_norm(&c.f[k][l].adjoint(), &c.f[l][k])?);
                    w[3] = w[3].max(diff_norm(&c.g[k][l].adjoint(), &c.g[l][k])?);
                }
            }
            let fifth = (0..s)
                .into_par_iter()
                .map(|k| {
                    let mut worst: f64 = 0.0;
                    for l in 0..s {
                        for mm in 0..s {
                            let fg = c.f[k][l].mul(&c.g[l][mm])?;
                            let gf = c.g[k][l].mul(&c.f[l][mm])?;
                            worst = worst.max(diff_norm(&fg, &c.f[k][mm])?).max(diff_norm(&gf, &c.f[k][mm])?);
                        }
                    }
                    Ok(worst)
                })
                .collect::<Result<Vec<f64>>>()?;
            w[4] = fifth.into_iter().fold(0.0, f64::max);
            Ok(w)
        })
        .collect::<Result<_>>()?;
    let mut worst = [0.0f64; 5];
    for w in per {
        for i in 0..5 {
            worst[i] = worst[i].max(w[i]);
        }
    }
    Ok(IdentityReport {
        worst,
        pass: worst.iter().all(|&v| v <= tol),
    })
}

/// Pointwise check of the covering estimate: whenever
/// `sum_i ‖sum_{j,k} f_kk 1_x‖ > 3/4`, the point lies in some `U_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverLemmaReport {
    pub min_value: f64,
    pub violations: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ExtractedCover {
    pub cover: ColoredCover,
    pub class_bound: usize,
    pub s_max: usize,
    pub report: CoverReport,
    /// Every class lies in `{σ̄_{1,k}(σ̄_{k0,1}(w))}` for one of its points.
    pub recursion_ok: bool,
    pub cover_lemma: CoverLemmaReport,
}

impl ExtractedCover {
    pub fn class_sizes(&self) -> Vec<Vec<usize>> {
        self.cover
            .families
            .iter()
            .map(|f| f.iter().map(Vec::len).collect())
            .collect()
    }

    pub fn class_bound_ok(&self) -> bool {
        self.class_bound <= self.s_max
    }

    pub fn passes(&self) -> bool {
        self.report.passes() && self.class_bound_ok() && self.recursion_ok && self.cover_lemma.violations.is_empty()
    }

    pub fn to_json(&self, space: &FiniteMetricSpace) -> serde_json::Value {
        let mut v = self.cover.to_json(space);
        v["S"] = serde_json::json!(self.class_bound);
        v["class_sizes"] = serde_json::json!(self.class_sizes());
        v["s_max"] = serde_json::json!(self.s_max);
        v["verify"] = serde_json::to_value(&self.report).unwrap_or_default();
        v["recursion_ok"] = serde_json::json!(self.recursion_ok);
        v["cover_lemma"] = serde_json::json!({
            "min_value": self.cover_lemma.min_value,
            "violations": self.cover_lemma.violations.iter().map(|&x| space.id(x).clone()).collect::<Vec<_>>(),
        });
        v
    }
}

pub fn extract_cover(pts: &PartialTranslationSystem, space: &FiniteMetricSpace, r: f64) -> Result<ExtractedCover> {
    if !pts.round_trip_ok() {
        let (c, k, l, x) = pts.round_trip_failures[0];
        return Err(Error::Precondition(format!(
            "translation system fails the round trip at corner {c}, units ({k},{l}), point {}",
            space.id(x)
        )));
    }
    if pts.points != space.len() {
        return Err(Error::Incompatible("translation system belongs to another space".into()));
    }
    let n = space.len();
    let colors = pts.d + 1;
    // where each point is found: (corner, k)
    let mut homes: Vec<Vec<Vec<(usize, usize)>>> = vec![vec![Vec::new(); n]; colors];
    for (ci, c) in pts.corners.iter().enumerate() {
        for (k, set) in c.sets.iter().enumerate() {
            for &x in set {
                homes[c.corner.color][x].push((ci, k));
            }
        }
    }
    let m = pts.corners.first().map_or(1, |c| c.f[0][0].row_fiber());
    let mut lemma_values = vec![0.0; n];
    for i in 0..colors {
        let mut sum = BlockMatrix::square(n, m);
        for c in pts.corners.iter().filter(|c| c.corner.color == i) {
            for k in 0..c.corner.size() {
                sum = sum.add(&c.f[k][k])?;
            }
        }
        for (x, v) in lemma_values.iter_mut().enumerate() {
            *v += column_norm_sq(&sum, x).sqrt();
        }
    }
    let covered = |x: usize| homes.iter().any(|h| !h[x].is_empty());
    let violations: Vec<usize> = (0..n).filter(|&x| lemma_values[x] > 0.75 && !covered(x)).collect();
    if let Some(x) = (0..n).find(|&x| !covered(x)) {
        return Err(Error::CoverGap {
            point: space.id(x).to_string(),
            detail: format!("in no translation domain (covering estimate {:.3e})", lemma_values[x]),
        });
    }
    let s = Scale::new(r);
    let mut families = Vec::with_capacity(colors);
    let mut recursion_ok = true;
    for home in homes.iter() {
        let members: Vec<usize> = (0..n).filter(|&x| !home[x].is_empty()).collect();
        let mut dsu = DisjointSet::new(n);
        for (a, &x) in members.iter().enumerate() {
            for &y in &members[a + 1..] {
                if space.within(x, y, &s) {
                    dsu.union(x, y);
                }
            }
        }
        let classes = dsu.groups(members);
        for class in &classes {
            let w0 = class[0];
            let (ci, k0) = home[w0][0];
            let sys = &pts.corners[ci];
            let orbit: Vec<usize> = match sys.sigma[k0][0].get(&w0) {
                Some(y) => (0..sys.corner.size())
                    .filter_map(|k| sys.sigma[0][k].get(y).copied())
                    .collect(),
                None => Vec::new(),
            };
            if !class.iter().all(|z| orbit.contains(z)) {
                recursion_ok = false;
            }
        }
        families.push(classes);
    }
    let class_bound = families.iter().flatten().map(Vec::len).max().unwrap_or(0);
    let cover = ColoredCover::new(space, families, r)?;
    let report = verify_cover(&cover, space, r);
    Ok(ExtractedCover {
        cover,
        class_bound,
        s_max: pts.s_max(),
        report,
        recursion_ok,
        cover_lemma: CoverLemmaReport {
            min_value: lemma_values.iter().copied().fold(f64::INFINITY, f64::min),
            violations,
        },
    })
}

/// Full lower-bound pipeline on a witness.
pub fn extract_from_witness(w: &DiagDimWitness, r: f64) -> Result<(ThresholdData, PartialTranslationSystem, ExtractedCover)> {
    let td = threshold_setup(w)?;
    let pts = build_translation_system(w, &td)?;
    let ex = extract_cover(&pts, &w.space, r)?;
    Ok((td, pts, ex))
}
