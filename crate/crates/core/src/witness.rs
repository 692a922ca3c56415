//! Witnesses for the diagonal dimension: the partition-of-unity construction
//! from a separated cover, the six-condition checker, renormalization through
//! the support of `ψ(1)`, and the direct sum and matrix amplification
//! combinators.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cover::{verify_cover, ColoredCover};
use crate::cpmaps::{
    cop_check, factorize_order_zero, order_zero_check, AlgebraDesc, BlockApplier, Bump, CpMap, FiniteDimAlgebra, Term,
    DEFAULT_ORDER_ZERO_TRIALS,
};
use crate::error::{Error, Result};
use crate::extract::decompose_neighbors;
use crate::operator::{normalizer_check, unit, BandOperator, Block, BlockMatrix, C, PINV_REL};
use crate::space::{generate_space, FiniteMetricSpace, GridSpec, PointId};

/// Seed of the order zero sampler used by condition 3.
const ORDER_ZERO_SEED: u64 = 0x0DD5;
/// Allowed gap in `φψ = (1+t) φ̂ψ̂`.
pub const HAT_RELATION_TOL: f64 = 1e-9;
pub const HAT_SAMPLES: usize = 50;
const HAT_SEED: u64 = 0x4A75;

#[derive(Clone, Debug, PartialEq)]
pub struct TestOperator {
    pub name: String,
    pub op: BlockMatrix,
}

/// A tuple `(F, ψ, φ)` with `ψ: A → F (x) B`, `φ: F (x) B → A`, where
/// `A` is the band algebra of `space` with fiber `B = M_m`.
///
/// Summand `k` of `F` carries color `summand_colors[k]`; the restriction of
/// `φ` to the summands of one color is `φ^(i)`.
#[derive(Clone, Debug)]
pub struct DiagDimWitness {
    pub space: Arc<FiniteMetricSpace>,
    pub d: usize,
    pub algebra: FiniteDimAlgebra,
    pub summand_colors: Vec<usize>,
    pub psi: CpMap,
    pub phi: CpMap,
    pub test_set: Vec<TestOperator>,
    pub eps: f64,
    /// For constructed witnesses: the points that the slots of each summand
    /// stand for.
    pub summand_points: Option<Vec<Vec<usize>>>,
}

impl DiagDimWitness {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        space: Arc<FiniteMetricSpace>,
        d: usize,
        algebra: FiniteDimAlgebra,
        summand_colors: Vec<usize>,
        psi: CpMap,
        phi: CpMap,
        test_set: Vec<TestOperator>,
        eps: f64,
    ) -> Result<Self> {
        let band = AlgebraDesc::Band {
            space: space.clone(),
            fiber: algebra.fiber_dim,
        };
        let fd = AlgebraDesc::Fd(algebra.clone());
        if psi.domain != band || psi.codomain != fd || phi.domain != fd || phi.codomain != band {
            return Err(Error::InvalidWitness("ψ and φ must map between A and F (x) B".into()));
        }
        if summand_colors.len() != algebra.summand_sizes.len() || summand_colors.iter().any(|&c| c > d) {
            return Err(Error::InvalidWitness("every summand needs a color in 0..=d".into()));
        }
        let n = space.len();
        let m = algebra.fiber_dim;
        for t in &test_set {
            if t.op.nrows() != n || t.op.ncols() != n || t.op.row_fiber() != m || t.op.col_fiber() != m {
                return Err(Error::InvalidWitness(format!("test operator {} has the wrong shape", t.name)));
            }
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidParameter(format!("epsilon {eps} must be positive")));
        }
        Ok(Self {
            space,
            d,
            algebra,
            summand_colors,
            psi,
            phi,
            test_set,
            eps,
            summand_points: None,
        })
    }

    pub fn fiber(&self) -> usize {
        self.algebra.fiber_dim
    }

    pub fn band(&self) -> AlgebraDesc {
        AlgebraDesc::Band {
            space: self.space.clone(),
            fiber: self.fiber(),
        }
    }

    pub fn color_summands(&self, color: usize) -> Vec<usize> {
        (0..self.summand_colors.len())
            .filter(|&k| self.summand_colors[k] == color)
            .collect()
    }

    /// `φ^(i)`: `φ` restricted to the summands of color `i`.
    pub fn phi_color(&self, color: usize) -> Result<CpMap> {
        let ks = self.color_summands(color);
        if ks.is_empty() {
            return Err(Error::InvalidParameter(format!("color {color} has no summands")));
        }
        let slots: Vec<usize> = ks.iter().flat_map(|&k| self.algebra.summand_range(k)).collect();
        let sizes = ks.iter().map(|&k| self.algebra.summand_sizes[k]).collect();
        self.phi.restrict_domain(&slots, sizes)
    }

    pub fn psi_one(&self) -> Result<BlockMatrix> {
        self.psi.apply(&BlockMatrix::identity(self.space.len(), self.fiber()))
    }

    pub fn with_test_set(mut self, tests: Vec<TestOperator>) -> Result<Self> {
        let (n, m) = (self.space.len(), self.fiber());
        for t in &tests {
            if t.op.nrows() != n || t.op.ncols() != n || t.op.row_fiber() != m || t.op.col_fiber() != m {
                return Err(Error::InvalidWitness(format!("test operator {} has the wrong shape", t.name)));
            }
        }
        self.test_set = tests;
        Ok(self)
    }

    pub fn with_eps(mut self, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::InvalidParameter(format!("epsilon {eps} must be positive")));
        }
        self.eps = eps;
        Ok(self)
    }

    /// `‖φψ(a) − a‖` for each test operator.
    pub fn approximation_errors(&self) -> Result<Vec<(String, f64)>> {
        self.test_set
            .par_iter()
            .map(|t| {
                let back = self.phi.apply(&self.psi.apply(&t.op)?)?;
                Ok((t.name.clone(), back.dist(&t.op)?))
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        let tests = self
            .test_set
            .iter()
            .map(|t| {
                let op = BandOperator::new(self.space.clone(), t.op.clone())?;
                Ok(serde_json::json!({"name": t.name, "op": op.to_json()}))
            })
            .collect::<Result<Vec<_>>>()?;
        let points = self.summand_points.as_ref().map(|ps| {
            ps.iter()
                .map(|p| p.iter().map(|&x| self.space.id(x).clone()).collect::<Vec<PointId>>())
                .collect::<Vec<_>>()
        });
        Ok(serde_json::json!({
            "d": self.d,
            "eps": self.eps,
            "fiber": self.fiber(),
            "summand_sizes": self.algebra.summand_sizes,
            "summand_colors": self.summand_colors,
            "summand_points": points,
            "psi": self.psi.to_json(),
            "phi": self.phi.to_json(),
            "test_set": tests,
        }))
    }

    pub fn from_json(v: &serde_json::Value, space: Arc<FiniteMetricSpace>) -> Result<Self> {
        let field = |k: &str| v.get(k).cloned().ok_or_else(|| Error::InvalidParameter(format!("witness field {k} missing")));
        let d: usize = serde_json::from_value(field("d")?)?;
        let eps: f64 = serde_json::from_value(field("eps")?)?;
        let fiber: usize = serde_json::from_value(field("fiber")?)?;
        let sizes: Vec<usize> = serde_json::from_value(field("summand_sizes")?)?;
        let colors: Vec<usize> = serde_json::from_value(field("summand_colors")?)?;
        let psi = CpMap::from_json(&field("psi")?, Some(&space))?;
        let phi = CpMap::from_json(&field("phi")?, Some(&space))?;
        let tests = field("test_set")?
            .as_array()
            .ok_or_else(|| Error::InvalidParameter("test_set must be a list".into()))?
            .iter()
            .map(|t| {
                Ok(TestOperator {
                    name: t["name"].as_str().unwrap_or_default().to_string(),
                    op: BandOperator::from_json(t["op"].clone(), space.clone())?.into_mat(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut w = Self::new(
            space.clone(),
            d,
            FiniteDimAlgebra::new(sizes, fiber)?,
            colors,
            psi,
            phi,
            tests,
            eps,
        )?;
        if let Some(ps) = v.get("summand_points").filter(|p| !p.is_null()) {
            let ids: Vec<Vec<PointId>> = serde_json::from_value(ps.clone())?;
            w.summand_points = Some(
                ids.iter()
                    .map(|p| p.iter().map(|id| space.index_of(id)).collect::<Result<Vec<_>>>())
                    .collect::<Result<_>>()?,
            );
        }
        Ok(w)
    }
}

/// The step functions `f_i` and the weights `h_i = sqrt(f_i / f)`, indexed
/// `[color][point]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionOfUnity {
    pub f: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    /// `B(U, r)` for every set, as `(color, points)`.
    pub balls: Vec<(usize, Vec<usize>)>,
}

fn le_scale(d: f64, t: f64) -> bool {
    d <= t + 1e-12 * t.abs().max(1.0)
}

/// `f_i = (1/n) sum_U sum_{k=1..n} 1_{B(U, k r / n)}` with `n = max(1, ceil r)`.
pub fn partition_of_unity(space: &FiniteMetricSpace, cover: &ColoredCover, r: f64) -> Result<PartitionOfUnity> {
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::InvalidParameter(format!("scale {r} must be a nonnegative number")));
    }
    let steps = (r.ceil() as usize).max(1);
    let radii: Vec<f64> = (1..=steps)
        .map(|k| if k == steps { r } else { k as f64 * r / steps as f64 })
        .collect();
    let n = space.len();
    let colors = cover.colors();
    let mut f = vec![vec![0.0; n]; colors];
    let mut balls = Vec::new();
    for (i, fam) in cover.families.iter().enumerate() {
        for set in fam {
            let mut ball = Vec::new();
            for (x, fx) in f[i].iter_mut().enumerate() {
                let dx = set.iter().map(|&u| space.dist(x, u)).fold(f64::INFINITY, f64::min);
                let hits = radii.iter().filter(|&&t| le_scale(dx, t)).count();
                if hits > 0 {
                    *fx += hits as f64 / steps as f64;
                    ball.push(x);
                }
            }
            balls.push((i, ball));
        }
    }
    let mut h = vec![vec![0.0; n]; colors];
    for x in 0..n {
        let total: f64 = (0..colors).map(|i| f[i][x]).sum();
        if total <= 0.0 {
            return Err(Error::CoverGap {
                point: space.id(x).to_string(),
                detail: format!("no cover set within distance {r}"),
            });
        }
        for i in 0..colors {
            h[i][x] = (f[i][x] / total).sqrt();
        }
    }
    Ok(PartitionOfUnity { f, h, balls })
}

/// Witness from a cover whose colors are `3r`-separated: `F` has one summand
/// per set `U`, of size `|B(U, r)|`; `ψ(T) = (h_i T h_i)` compressed to the
/// balls, `φ` is the sum of the ball inclusions.
pub fn build_upper_witness(space: Arc<FiniteMetricSpace>, cover: &ColoredCover, r: f64, m: usize) -> Result<DiagDimWitness> {
    let tests = propagation_tests(&space, r, m)?;
    build_upper_witness_with_tests(space, cover, r, m, tests)
}

/// `unit` plus the partial translations `a1, a2, ...` covering all pairs
/// within `scale`.
pub fn propagation_tests(space: &Arc<FiniteMetricSpace>, scale: f64, m: usize) -> Result<Vec<TestOperator>> {
    let parts = decompose_neighbors(space, scale)?;
    let mut tests = vec![TestOperator {
        name: "unit".into(),
        op: BlockMatrix::identity(space.len(), m),
    }];
    for (k, a) in parts.translations(space.clone(), m).into_iter().enumerate() {
        tests.push(TestOperator {
            name: format!("a{}", k + 1),
            op: a.into_mat(),
        });
    }
    Ok(tests)
}

pub fn build_upper_witness_with_tests(
    space: Arc<FiniteMetricSpace>,
    cover: &ColoredCover,
    r: f64,
    m: usize,
    tests: Vec<TestOperator>,
) -> Result<DiagDimWitness> {
    if m == 0 {
        return Err(Error::InvalidParameter("fiber must be at least 1".into()));
    }
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::InvalidParameter(format!("scale {r} must be a nonnegative number")));
    }
    let report = verify_cover(cover, &space, 3.0 * r);
    if let Some(i) = report.separated.iter().position(|&s| !s) {
        return Err(Error::Precondition(format!(
            "color {i} of the cover is not {}-separated",
            3.0 * r
        )));
    }
    let pou = partition_of_unity(&space, cover, r)?;
    let n = space.len();
    let sizes: Vec<usize> = pou.balls.iter().map(|(_, b)| b.len()).collect();
    let colors: Vec<usize> = pou.balls.iter().map(|(i, _)| *i).collect();
    let algebra = FiniteDimAlgebra::new(sizes, m)?;
    let slots = algebra.slots();
    let id = Block::identity(m, m);
    let mut psi_terms = Vec::with_capacity(pou.balls.len());
    let mut phi_terms = Vec::with_capacity(pou.balls.len());
    for (k, (i, ball)) in pou.balls.iter().enumerate() {
        let o = algebra.offset(k);
        let w = BlockMatrix::from_blocks(
            slots,
            n,
            m,
            m,
            ball.iter()
                .enumerate()
                .map(|(s, &x)| ((o + s, x), &id * C::new(pou.h[*i][x], 0.0))),
        );
        psi_terms.push(Term::conjugation(w));
        let v = BlockMatrix::from_blocks(n, slots, m, m, ball.iter().enumerate().map(|(s, &x)| ((x, o + s), id.clone())));
        phi_terms.push(Term::conjugation(v));
    }
    let band = AlgebraDesc::Band {
        space: space.clone(),
        fiber: m,
    };
    let fd = AlgebraDesc::Fd(algebra.clone());
    let psi = CpMap::structural(band.clone(), fd.clone(), psi_terms)?;
    let phi = CpMap::structural(fd, band, phi_terms)?;
    let mut w = DiagDimWitness::new(space, cover.d(), algebra, colors, psi, phi, tests, 1.0)?;
    w.summand_points = Some(pou.balls.into_iter().map(|(_, b)| b).collect());
    Ok(w)
}

/// The witness on a one-point space: `ψ = φ = id` on `M_m`.
pub fn single_point_witness(m: usize) -> Result<DiagDimWitness> {
    let space = Arc::new(generate_space(&GridSpec::interval(1))?);
    let cover = ColoredCover::new(&space, vec![vec![vec![0]]], 0.0)?;
    build_upper_witness(space, &cover, 0.0, m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: u8,
    pub name: String,
    pub verdict: bool,
    pub worst: f64,
    pub witness_element: Option<String>,
}

/// Evaluates the six defining conditions. Condition 2 is the measured
/// approximation error judged against the witness `ε`; the others are
/// judged against `tol`.
pub fn check_witness(w: &DiagDimWitness, tol: f64) -> Result<Vec<ConditionReport>> {
    if w.test_set.is_empty() {
        return Err(Error::InvalidWitness("the test set is empty".into()));
    }
    let mut out = Vec::with_capacity(6);

    let n1 = w.psi_one()?.norm();
    out.push(ConditionReport {
        condition: 1,
        name: "psi_contractive".into(),
        verdict: n1 <= 1.0 + tol,
        worst: (n1 - 1.0).max(0.0),
        witness_element: Some("unit".into()),
    });

    let errs = w.approximation_errors()?;
    let (arg, worst) = errs
        .iter()
        .fold((None, 0.0), |(a, best), (name, e)| if *e > best || a.is_none() { (Some(name.clone()), *e) } else { (a, best) });
    out.push(ConditionReport {
        condition: 2,
        name: "approximation".into(),
        verdict: worst.is_finite() && worst < w.eps,
        worst,
        witness_element: arg,
    });

    let colors: Vec<usize> = (0..=w.d).filter(|&i| !w.color_summands(i).is_empty()).collect();
    let per_color: Vec<(usize, bool, f64, f64, bool)> = colors
        .iter()
        .map(|&i| {
            let phi_i = w.phi_color(i)?;
            let oz = order_zero_check(&phi_i, DEFAULT_ORDER_ZERO_TRIALS, ORDER_ZERO_SEED)?;
            let norm = phi_i.apply(&phi_i.domain.unit())?.norm();
            // a map that does not factor fails the commutation property outright
            let (cop_worst, cop_pass) = match factorize_order_zero(&phi_i) {
                Ok(fac) => {
                    let cop = cop_check(&fac, tol)?;
                    (cop.worst, cop.pass)
                }
                Err(Error::FactorizationInvalid { deviation, .. }) => (deviation, false),
                Err(e) => return Err(e),
            };
            Ok((i, oz.pass && norm <= 1.0 + tol, oz.worst.max(norm - 1.0).max(0.0), cop_worst, cop_pass))
        })
        .collect::<Result<_>>()?;
    let worst3 = per_color.iter().fold((None, 0.0), |acc, c| {
        if acc.0.is_none() || c.2 > acc.1 {
            (Some(c.0), c.2)
        } else {
            acc
        }
    });
    out.push(ConditionReport {
        condition: 3,
        name: "order_zero_colors".into(),
        verdict: per_color.iter().all(|c| c.1),
        worst: worst3.1,
        witness_element: worst3.0.map(|i| format!("color {i}")),
    });

    let m = w.fiber();
    let psi_app = BlockApplier::new(&w.psi);
    let diag: Vec<(f64, String)> = (0..w.space.len())
        .into_par_iter()
        .map(|x| {
            let mut worst = (0.0, String::new());
            for p in 0..m {
                for q in 0..m {
                    let img = psi_app.apply(x, x, &unit(m, p, q))?;
                    let off = img.off_diagonal_mass();
                    if off > worst.0 || worst.1.is_empty() {
                        worst = (off, format!("1_{} (x) E_{p}{q}", w.space.id(x)));
                    }
                }
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    let worst4 = diag.into_iter().fold((0.0, None), |acc, (v, name)| if acc.1.is_none() || v > acc.0 { (v, Some(name)) } else { acc });
    out.push(ConditionReport {
        condition: 4,
        name: "diagonal_preserving".into(),
        verdict: worst4.0 <= tol,
        worst: worst4.0,
        witness_element: worst4.1,
    });

    let phi_app = BlockApplier::new(&w.phi);
    let gens: Vec<(usize, usize, usize)> = (0..w.algebra.summand_sizes.len())
        .flat_map(|k| {
            let r = w.algebra.summand_range(k);
            r.clone().flat_map(move |s| r.clone().map(move |t| (k, s, t)))
        })
        .collect();
    let norm5: Vec<(bool, f64, String)> = gens
        .par_iter()
        .map(|&(k, s, t)| {
            let mut acc = (true, 0.0, String::new());
            let mut fibers: Vec<(String, Block)> = vec![("1".into(), Block::identity(m, m))];
            for p in 0..m {
                for q in 0..m {
                    fibers.push((format!("E_{p}{q}"), unit(m, p, q)));
                }
            }
            for (label, b) in fibers {
                let img = phi_app.apply(s, t, &b)?;
                let rep = normalizer_check(&img, tol);
                if !rep.pass {
                    acc.0 = false;
                }
                if rep.worst > acc.1 || acc.2.is_empty() {
                    acc.1 = rep.worst;
                    let o = w.algebra.offset(k);
                    acc.2 = format!("summand {k}: e_{},{} (x) {label}", s - o, t - o);
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let worst5 = norm5.iter().fold((0.0, None), |acc, c| if acc.1.is_none() || c.1 > acc.0 { (c.1, Some(c.2.clone())) } else { acc });
    out.push(ConditionReport {
        condition: 5,
        name: "normalizer_images".into(),
        verdict: norm5.iter().all(|c| c.0),
        worst: worst5.0,
        witness_element: worst5.1,
    });

    let worst6 = per_color.iter().fold((None, 0.0), |acc, c| {
        if acc.0.is_none() || c.3 > acc.1 {
            (Some(c.0), c.3)
        } else {
            acc
        }
    });
    out.push(ConditionReport {
        condition: 6,
        name: "commutation_property".into(),
        verdict: per_color.iter().all(|c| c.4),
        worst: worst6.1,
        witness_element: worst6.0.map(|i| format!("color {i}")),
    });
    Ok(out)
}

/// Renormalized maps `ψ̂ = p' ψ p'` and `φ̂ = φ(p · p) / (1 + t)` on the
/// support of `ψ(1)`, where `p = ζ(ψ(1))`, `p' = ζ'(ψ(1))` and `t` is the
/// witness `ε`. The knee of `ζ` is `t / (2(d+1))`.
#[derive(Clone, Debug)]
pub struct HatPair {
    pub t: f64,
    pub p: BlockMatrix,
    pub p_prime: BlockMatrix,
    pub support: BlockMatrix,
    pub psi_hat: CpMap,
    pub phi_hat: CpMap,
    /// `max ‖φψ(a) − (1+t) φ̂ψ̂(a)‖` over the test set.
    pub relation_error: f64,
    /// `‖φ̂ψ̂(a) − a‖` over the test set and its pairwise products.
    pub approximation: Vec<(String, f64)>,
    /// Worst `‖φ̂(ψ̂(a) b) − φ̂ψ̂(a) φ̂(b)‖` over test operators `a` and
    /// sampled unit-ball corner elements `b`.
    pub multiplicativity: f64,
    pub approximation_bound: f64,
    pub multiplicativity_bound: f64,
}

impl HatPair {
    pub fn approximation_worst(&self) -> f64 {
        self.approximation.iter().map(|a| a.1).fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.relation_error <= HAT_RELATION_TOL
            && self.approximation_worst() < self.approximation_bound
            && self.multiplicativity < self.multiplicativity_bound
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "t": self.t,
            "relation_error": self.relation_error,
            "approximation": self.approximation.iter().map(|(n, e)| serde_json::json!({"element": n, "error": e})).collect::<Vec<_>>(),
            "approximation_worst": self.approximation_worst(),
            "approximation_bound": self.approximation_bound,
            "multiplicativity": self.multiplicativity,
            "multiplicativity_bound": self.multiplicativity_bound,
            "pass": self.passes(),
        })
    }
}

pub fn hat_normalize(w: &DiagDimWitness) -> Result<HatPair> {
    hat_normalize_seeded(w, HAT_SAMPLES, HAT_SEED)
}

pub fn hat_normalize_seeded(w: &DiagDimWitness, samples: usize, seed: u64) -> Result<HatPair> {
    let t = w.eps;
    // ζ with knee ε²/(81·2(d+1)) and ε = 9 sqrt(t)
    let eps_outer = 9.0 * t.sqrt();
    let zeta = Bump::zeta(w.d, eps_outer)?;
    let zeta_p = Bump::zeta_prime(w.d, eps_outer)?;
    let one = w.psi_one()?;
    let eig = one.hermitian_eigen()?;
    let vals = eig.eigenvalues();
    let top = eig.max_abs();
    if let Some(neg) = vals.iter().copied().find(|&l| l < -PINV_REL * top.max(1.0)) {
        return Err(Error::InvalidWitness(format!("ψ(1) has negative spectrum {neg:e}")));
    }
    let cut = PINV_REL * top;
    let inside = |l: f64| l.abs() > cut;
    let p = eig.apply(|l| if inside(l) { zeta.eval(l) } else { 0.0 });
    let p_prime = eig.apply(|l| if inside(l) { zeta_p.eval(l) } else { 0.0 });
    let support = eig.apply(|l| if inside(l) { 1.0 } else { 0.0 });
    let psi_hat = w.psi.with_output_factors(&p_prime, &p_prime)?;
    let phi_hat = w.phi.with_input_factors(w.phi.domain.clone(), &p.scale_real(1.0 / (1.0 + t)), &p)?;

    let hat_of = |a: &BlockMatrix| -> Result<BlockMatrix> { phi_hat.apply(&psi_hat.apply(a)?) };
    let relation_error = w
        .test_set
        .par_iter()
        .map(|a| {
            let plain = w.phi.apply(&w.psi.apply(&a.op)?)?;
            plain.dist(&hat_of(&a.op)?.scale_real(1.0 + t))
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);

    let mut elements: Vec<(String, BlockMatrix)> = w.test_set.iter().map(|a| (a.name.clone(), a.op.clone())).collect();
    for a in &w.test_set {
        for b in &w.test_set {
            elements.push((format!("{}*{}", a.name, b.name), a.op.mul(&b.op)?));
        }
    }
    let approximation = elements
        .par_iter()
        .map(|(name, a)| Ok((name.clone(), hat_of(a)?.dist(a)?)))
        .collect::<Result<Vec<_>>>()?;

    let psi_hats: Vec<(BlockMatrix, BlockMatrix)> = w
        .test_set
        .par_iter()
        .map(|a| {
            let pa = psi_hat.apply(&a.op)?;
            let back = phi_hat.apply(&pa)?;
            Ok((pa, back))
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = w.fiber();
    let mut probes = Vec::with_capacity(samples);
    while probes.len() < samples {
        let k = rng.gen_range(0..w.algebra.summand_sizes.len());
        let dim = w.algebra.summand_sizes[k] * m;
        let raw = DMatrix::from_fn(dim, dim, |_, _| C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let o = w.algebra.offset(k);
        let b = BlockMatrix::from_dense(&raw, m, m).embed(w.algebra.slots(), w.algebra.slots(), o, o);
        let b = BlockMatrix::chain(&[&support, &b, &support])?;
        let nb = b.norm();
        if nb > 0.0 {
            probes.push(b.scale_real(1.0 / nb));
        } else if support.is_zero() {
            break;
        }
    }
    let multiplicativity = probes
        .par_iter()
        .map(|b| {
            let fb = phi_hat.apply(b)?;
            let mut worst: f64 = 0.0;
            for (pa, back) in &psi_hats {
                let lhs = phi_hat.apply(&pa.mul(b)?)?;
                worst = worst.max(lhs.dist(&back.mul(&fb)?)?);
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(HatPair {
        t,
        p,
        p_prime,
        support,
        psi_hat,
        phi_hat,
        relation_error,
        approximation,
        multiplicativity,
        approximation_bound: 3.0 * t,
        multiplicativity_bound: 6.0 * t.sqrt(),
    })
}

#[derive(Clone, Copy, Debug)]
pub enum Permanence<'a> {
    DirectSum(&'a DiagDimWitness),
    TensorMatrix(usize),
}

pub fn permanence_combine(w: &DiagDimWitness, kind: Permanence<'_>) -> Result<DiagDimWitness> {
    match kind {
        Permanence::DirectSum(other) => direct_sum(w, other),
        Permanence::TensorMatrix(n) => tensor_matrix(w, n),
    }
}

fn structural_terms(map: &CpMap) -> Result<&[Term]> {
    map.terms()
        .ok_or_else(|| Error::Incompatible("permanence needs maps given by terms".into()))
}

/// Witness for `A (+) C` over the disjoint union of the two spaces.
pub fn direct_sum(w1: &DiagDimWitness, w2: &DiagDimWitness) -> Result<DiagDimWitness> {
    let m = w1.fiber();
    if w2.fiber() != m {
        return Err(Error::Incompatible(format!("fibers {} and {} differ", m, w2.fiber())));
    }
    let space = Arc::new(w1.space.disjoint_union(&w2.space)?);
    let (n1, n) = (w1.space.len(), space.len());
    let mut sizes = w1.algebra.summand_sizes.clone();
    sizes.extend(&w2.algebra.summand_sizes);
    let algebra = FiniteDimAlgebra::new(sizes, m)?;
    let (f1, f) = (w1.algebra.slots(), algebra.slots());
    let mut psi_terms = Vec::new();
    let mut phi_terms = Vec::new();
    for (w, x_off, f_off) in [(w1, 0, 0), (w2, n1, f1)] {
        for t in structural_terms(&w.psi)? {
            psi_terms.push(Term {
                left: t.left.embed(f, n, f_off, x_off),
                right: t.right.embed(n, f, x_off, f_off),
            });
        }
        for t in structural_terms(&w.phi)? {
            phi_terms.push(Term {
                left: t.left.embed(n, f, x_off, f_off),
                right: t.right.embed(f, n, f_off, x_off),
            });
        }
    }
    let band = AlgebraDesc::Band {
        space: space.clone(),
        fiber: m,
    };
    let fd = AlgebraDesc::Fd(algebra.clone());
    let psi = CpMap::structural(band.clone(), fd.clone(), psi_terms)?;
    let phi = CpMap::structural(fd, band, phi_terms)?;
    let mut tests = vec![TestOperator {
        name: "unit".into(),
        op: BlockMatrix::identity(n, m),
    }];
    for (w, x_off, tag) in [(w1, 0, "L"), (w2, n1, "R")] {
        for t in &w.test_set {
            tests.push(TestOperator {
                name: format!("{tag}:{}", t.name),
                op: t.op.embed(n, n, x_off, x_off),
            });
        }
    }
    let mut colors = w1.summand_colors.clone();
    colors.extend(&w2.summand_colors);
    let mut out = DiagDimWitness::new(space, w1.d.max(w2.d), algebra, colors, psi, phi, tests, w1.eps.max(w2.eps))?;
    if let (Some(a), Some(b)) = (&w1.summand_points, &w2.summand_points) {
        let mut pts = a.clone();
        pts.extend(b.iter().map(|p| p.iter().map(|&x| x + n1).collect()));
        out.summand_points = Some(pts);
    }
    Ok(out)
}

/// Witness for `M_n(A)`, realized as the band algebra of `n` copies of the
/// space; every summand `M_k` of `F` becomes `M_{kn}`.
pub fn tensor_matrix(w: &DiagDimWitness, copies: usize) -> Result<DiagDimWitness> {
    if copies == 0 {
        return Err(Error::InvalidParameter("matrix size must be at least 1".into()));
    }
    let m = w.fiber();
    let space = Arc::new(w.space.with_copies(copies)?);
    let nx = w.space.len();
    let n = space.len();
    let old = &w.algebra;
    let algebra = FiniteDimAlgebra::new(old.summand_sizes.iter().map(|&k| k * copies).collect(), m)?;
    let f = algebra.slots();
    let fslot = |slot: usize, c: usize| {
        let k = old.summand_of(slot);
        old.offset(k) * copies + c * old.summand_sizes[k] + (slot - old.offset(k))
    };
    let xslot = |x: usize, c: usize| c * nx + x;
    let lift = |a: &BlockMatrix, rows: usize, cols: usize, row_map: &dyn Fn(usize, usize) -> usize, col_map: &dyn Fn(usize, usize) -> usize| {
        BlockMatrix::from_blocks(
            rows,
            cols,
            m,
            m,
            (0..copies).flat_map(|c| {
                a.blocks()
                    .map(move |(&(i, j), b)| ((row_map(i, c), col_map(j, c)), b.clone()))
                    .collect::<Vec<_>>()
            }),
        )
    };
    let psi_terms = structural_terms(&w.psi)?
        .iter()
        .map(|t| Term {
            left: lift(&t.left, f, n, &fslot, &xslot),
            right: lift(&t.right, n, f, &xslot, &fslot),
        })
        .collect();
    let phi_terms = structural_terms(&w.phi)?
        .iter()
        .map(|t| Term {
            left: lift(&t.left, n, f, &xslot, &fslot),
            right: lift(&t.right, f, n, &fslot, &xslot),
        })
        .collect();
    let band = AlgebraDesc::Band {
        space: space.clone(),
        fiber: m,
    };
    let fd = AlgebraDesc::Fd(algebra.clone());
    let psi = CpMap::structural(band.clone(), fd.clone(), psi_terms)?;
    let phi = CpMap::structural(fd, band, phi_terms)?;
    let mut tests = vec![TestOperator {
        name: "unit".into(),
        op: BlockMatrix::identity(n, m),
    }];
    for t in &w.test_set {
        for a in 0..copies {
            for b in 0..copies {
                tests.push(TestOperator {
                    name: format!("{}[{a},{b}]", t.name),
                    op: t.op.embed(n, n, a * nx, b * nx),
                });
            }
        }
    }
    let mut out = DiagDimWitness::new(space, w.d, algebra, w.summand_colors.clone(), psi, phi, tests, w.eps)?;
    out.summand_points = w.summand_points.as_ref().map(|ps| {
        ps.iter()
            .map(|p| (0..copies).flat_map(|c| p.iter().map(move |&x| xslot(x, c))).collect())
            .collect()
    });
    Ok(out)
}

/// Conjugates the witness by a diagonal unitary `u = (u_x)`:
/// `ψ' = ψ(u* · u)`, `φ' = u φ(·) u*`. The result satisfies the same
/// conditions with nontrivial fiber blocks.
pub fn twisted(w: &DiagDimWitness, u: &BlockMatrix) -> Result<DiagDimWitness> {
    let band = w.band();
    let ua = u.adjoint();
    let mut out = w.clone();
    out.psi = w.psi.with_input_factors(band, &ua, u)?;
    out.phi = w.phi.with_output_factors(u, &ua)?;
    Ok(out)
}

/// Diagonal unitary with independent random fiber blocks.
pub fn random_diagonal_unitary(n: usize, m: usize, seed: u64) -> BlockMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BlockMatrix::from_blocks(n, n, m, m, (0..n).map(|x| ((x, x), crate::cpmaps::random_unitary(&mut rng, m))).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cover::brick_cover;
    use proptest::prelude::*;

    fn interval(n: usize) -> Arc<FiniteMetricSpace> {
        Arc::new(generate_space(&GridSpec::interval(n)).unwrap())
    }

    fn interval_witness(n: usize, r: f64, side: f64, m: usize) -> DiagDimWitness {
        let space = interval(n);
        let cover = brick_cover(&space, r, side).unwrap();
        build_upper_witness(space, &cover, r, m).unwrap()
    }

    fn all_pass(rep: &[ConditionReport]) -> bool {
        rep.iter().all(|c| c.verdict)
    }

    #[test]
    fn single_point_is_identity() {
        let w = single_point_witness(2).unwrap();
        assert_eq!(w.d, 0);
        let a = BlockMatrix::from_dense(
            &DMatrix::from_row_slice(2, 2, &[C::new(1.0, 0.5), C::new(2.0, 0.0), C::new(0.0, -1.0), C::new(3.0, 0.0)]),
            2,
            2,
        );
        assert_eq!(w.psi.apply(&a).unwrap().to_dense(), a.to_dense());
        assert_eq!(w.phi.apply(&a).unwrap().to_dense(), a.to_dense());
        let rep = check_witness(&w, 1e-9).unwrap();
        assert!(all_pass(&rep));
        assert_eq!(rep[1].worst, 0.0);
    }

    #[test]
    fn deep_points_carry_full_weight() {
        let space = interval(60);
        let cover = brick_cover(&space, 5.0, 30.0).unwrap();
        assert_eq!(cover.colors(), 2);
        let pou = partition_of_unity(&space, &cover, 5.0).unwrap();
        // oracle: f_i(x) = (1/5) sum_U #{k in 1..=5 : dist(x, U) <= k}
        for i in 0..2 {
            for x in 0..60usize {
                let mut want = 0.0;
                for u in &cover.families[i] {
                    let dx = u.iter().map(|&y| (x as i64 - y as i64).abs()).min().unwrap();
                    want += (1..=5).filter(|&k| dx <= k).count() as f64 / 5.0;
                }
                assert!((pou.f[i][x] - want).abs() < 1e-15);
            }
        }
        assert_eq!(pou.f[0][10], 1.0);
        assert_eq!(pou.h[0][10], 1.0);
        assert_eq!(pou.h[1][10], 0.0);
        for x in 0..60 {
            let s: f64 = (0..2).map(|i| pou.h[i][x].powi(2)).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn interval_witness_passes_structural_conditions() {
        let w = interval_witness(60, 5.0, 30.0, 1);
        let rep = check_witness(&w, 1e-9).unwrap();
        for k in [0, 2, 3, 4, 5] {
            assert!(rep[k].verdict, "{:?}", rep[k]);
            assert_eq!(rep[k].worst, 0.0);
        }
        assert!(rep[1].worst.is_finite());
    }

    #[test]
    fn unseparated_cover_is_rejected() {
        let space = interval(40);
        let cover = brick_cover(&space, 5.0, 11.0).unwrap();
        assert!(matches!(build_upper_witness(space, &cover, 5.0, 1), Err(Error::Precondition(_))));
    }

    #[test]
    fn uncovered_point_is_named() {
        let space = interval(20);
        let cover = ColoredCover::new(&space, vec![vec![(0..10).collect()]], 1.0).unwrap();
        match build_upper_witness(space, &cover, 1.0, 1) {
            Err(Error::CoverGap { point, .. }) => assert_eq!(point, "11"),
            other => panic!("expected a cover gap, got {other:?}"),
        }
    }

    #[test]
    fn mixed_shift_breaks_normalizers() {
        let w = interval_witness(40, 2.0, 8.0, 1);
        let n = w.space.len();
        let up: Vec<(usize, usize)> = (0..n - 1).map(|x| (x + 1, x)).collect();
        let shift = BandOperator::partial_translation(w.space.clone(), 1, &up).into_mat();
        let mix = BlockMatrix::identity(n, 1).add(&shift).unwrap().scale_real(0.5);
        let mut bad = w.clone();
        bad.phi = w.phi.with_output_factors(&mix, &BlockMatrix::identity(n, 1)).unwrap();
        let rep = check_witness(&bad, 1e-9).unwrap();
        assert!(!rep[4].verdict);
        assert!(rep[4].worst > 0.1);
    }

    #[test]
    fn hat_of_identity_witness() {
        let w = single_point_witness(1).unwrap().with_eps(0.01).unwrap();
        let hat = hat_normalize(&w).unwrap();
        assert_eq!(hat.p.to_dense(), BlockMatrix::identity(1, 1).to_dense());
        assert_eq!(hat.p_prime.to_dense(), BlockMatrix::identity(1, 1).to_dense());
        let a = BlockMatrix::identity(1, 1).scale_real(0.7);
        let ph = hat.phi_hat.apply(&a).unwrap();
        assert!((ph.to_dense()[(0, 0)].re - 0.7 / 1.01).abs() < 1e-15);
        assert!(hat.relation_error < 1e-15);
        assert!(hat.passes());
    }

    #[test]
    fn negative_psi_one_is_invalid() {
        let mut w = single_point_witness(1).unwrap();
        w.psi = w.psi.scale(-1.0);
        assert!(matches!(hat_normalize(&w), Err(Error::InvalidWitness(_))));
    }

    #[test]
    fn combinators() {
        let a = single_point_witness(1).unwrap();
        let s = direct_sum(&a, &a).unwrap();
        assert_eq!(s.d, 0);
        assert_eq!(s.space.len(), 2);
        assert!(all_pass(&check_witness(&s, 1e-9).unwrap()));
        let b = single_point_witness(2).unwrap();
        assert!(matches!(direct_sum(&a, &b), Err(Error::Incompatible(_))));

        let w = interval_witness(24, 2.0, 8.0, 1).with_eps(0.5).unwrap();
        let mixed = direct_sum(&w, &a).unwrap();
        assert_eq!(mixed.d, 1);
        assert!(all_pass(&check_witness(&mixed, 1e-9).unwrap()));
        let t = tensor_matrix(&w, 2).unwrap();
        assert_eq!(t.d, w.d);
        assert_eq!(t.space.len(), 48);
        let rep = check_witness(&t, 1e-9).unwrap();
        assert!(all_pass(&rep), "{rep:?}");
        // the amplified error equals the original one
        let base = check_witness(&w, 1e-9).unwrap()[1].worst;
        assert!((rep[1].worst - base).abs() < 1e-12);
    }

    #[test]
    fn twisted_witness_keeps_conditions() {
        let w = interval_witness(20, 1.0, 4.0, 2).with_eps(0.9).unwrap();
        let u = random_diagonal_unitary(20, 2, 3);
        let t = twisted(&w, &u).unwrap();
        let rep = check_witness(&t, 1e-9).unwrap();
        assert!(all_pass(&rep), "{rep:?}");
        let base = check_witness(&w, 1e-9).unwrap()[1].worst;
        assert!((rep[1].worst - base).abs() < 1e-9);
    }

    #[test]
    fn json_round_trip() {
        let w = interval_witness(20, 1.0, 4.0, 1);
        let v = w.to_json().unwrap();
        let back = DiagDimWitness::from_json(&v, w.space.clone()).unwrap();
        assert_eq!(back.psi, w.psi);
        assert_eq!(back.phi, w.phi);
        assert_eq!(back.test_set, w.test_set);
        assert_eq!(back.summand_points, w.summand_points);
    }

    #[test]
    fn colors_are_orthogonal_on_disjoint_balls() {
        let w = interval_witness(60, 3.0, 12.0, 1);
        let balls = w.summand_points.clone().unwrap();
        for i in 0..=w.d {
            let ks = w.color_summands(i);
            for (a, &k) in ks.iter().enumerate() {
                for &l in &ks[a + 1..] {
                    assert!(balls[k].iter().all(|x| !balls[l].contains(x)));
                }
            }
            let phi_i = w.phi_color(i).unwrap();
            if ks.len() < 2 {
                continue;
            }
            let alg = match &phi_i.domain {
                AlgebraDesc::Fd(f) => f.clone(),
                _ => unreachable!(),
            };
            let pa = alg.matrix_unit(0, 0, 0, Block::identity(1, 1));
            let pb = alg.matrix_unit(1, 1, 1, Block::identity(1, 1));
            let prod = phi_i.apply(&pa).unwrap().mul(&phi_i.apply(&pb).unwrap()).unwrap();
            assert!(prod.is_zero());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn weights_square_sum_to_one(n in 8usize..40, r in 1usize..4, extra in 0usize..4, m in 1usize..3) {
            let r = r as f64;
            let space = interval(n);
            let cover = brick_cover(&space, r, 3.0 * r + extra as f64).unwrap();
            let pou = partition_of_unity(&space, &cover, r).unwrap();
            for x in 0..n {
                let s: f64 = pou.h.iter().map(|h| h[x] * h[x]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            let w = build_upper_witness(space, &cover, r, m).unwrap();
            prop_assert!(w.psi_one().unwrap().norm() <= 1.0 + 1e-12);
        }
    }
}
