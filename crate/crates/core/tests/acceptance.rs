//! Acceptance suite: one line per criterion, run sequentially so the
//! runtime limits measure a single pipeline at a time. Runs without the
//! test harness so the lines always reach stdout.

use std::sync::Arc;
use std::time::{Duration, Instant};

use diagdim_core::cover::{brick_cover, ColoredCover};
use diagdim_core::cpmaps::{
    choi_check, cop_check, factorize_order_zero, random_unitary, AlgebraDesc, CpMap, FiniteDimAlgebra, Term,
};
use diagdim_core::extract::{
    constants, decompose_neighbors, extract_from_witness, matrix_unit_identities, threshold_setup, IDENTITY_TOL,
};
use diagdim_core::operator::{c, Block, BlockMatrix, C};
use diagdim_core::space::{generate_space, ulf_profile, FiniteMetricSpace, GridSpec, Metric};
use diagdim_core::witness::{
    build_upper_witness, build_upper_witness_with_tests, check_witness, direct_sum, hat_normalize,
    random_diagonal_unitary, single_point_witness, tensor_matrix, twisted, DiagDimWitness, TestOperator,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-9;
const EPS: f64 = 0.2;
const LEN: usize = 150;
const FIBER: usize = 2;
const R: f64 = 5.0;
const SIDE: f64 = 30.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn interval(n: usize) -> Arc<FiniteMetricSpace> {
    Arc::new(generate_space(&GridSpec::interval(n)).unwrap())
}

/// `{1} ∪ {a_m}` for the propagation-1 partial translations.
fn propagation_one_tests(space: &Arc<FiniteMetricSpace>, m: usize, with_unit: bool) -> Vec<TestOperator> {
    let mut out = Vec::new();
    if with_unit {
        out.push(TestOperator {
            name: "unit".into(),
            op: BlockMatrix::identity(space.len(), m),
        });
    }
    for (k, a) in decompose_neighbors(space, 1.0)
        .unwrap()
        .translations(space.clone(), m)
        .into_iter()
        .enumerate()
    {
        out.push(TestOperator {
            name: format!("a{}", k + 1),
            op: a.into_mat(),
        });
    }
    out
}

fn interval_witness(r: f64, side: f64, with_unit: bool) -> DiagDimWitness {
    let space = interval(LEN);
    let cover = brick_cover(&space, r, side).unwrap();
    let tests = propagation_one_tests(&space, FIBER, with_unit);
    build_upper_witness_with_tests(space, &cover, r, FIBER, tests)
        .unwrap()
        .with_eps(EPS)
        .unwrap()
}

fn dense_norm(d: &DMatrix<C>) -> f64 {
    if d.is_empty() {
        0.0
    } else {
        d.singular_values().max()
    }
}

/// `Φ∘Ψ(a)` recomputed densely from the weight formula, independent of the
/// map machinery: entry block `(x, y)` is scaled by
/// `sum over sets U of color i with x, y in B(U, r)` of `h_i(x) h_i(y)`.
fn dense_round_trip(space: &FiniteMetricSpace, cover: &ColoredCover, r: f64, a: &BlockMatrix) -> DMatrix<C> {
    let n = space.len();
    let steps = (r.ceil() as usize).max(1);
    let dist_to = |x: usize, u: &[usize]| u.iter().map(|&y| space.dist(x, y)).fold(f64::INFINITY, f64::min);
    let mut f = vec![vec![0.0; n]; cover.colors()];
    let mut balls = Vec::new();
    for (i, fam) in cover.families.iter().enumerate() {
        for u in fam {
            let ball: Vec<bool> = (0..n).map(|x| dist_to(x, u) <= r).collect();
            for x in 0..n {
                let d = dist_to(x, u);
                f[i][x] += (1..=steps).filter(|&k| d <= k as f64 * r / steps as f64).count() as f64 / steps as f64;
            }
            balls.push((i, ball));
        }
    }
    let h: Vec<Vec<f64>> = f
        .iter()
        .map(|fi| (0..n).map(|x| (fi[x] / f.iter().map(|g| g[x]).sum::<f64>()).sqrt()).collect())
        .collect();
    let m = a.row_fiber();
    let dense = a.to_dense();
    DMatrix::from_fn(n * m, n * m, |p, q| {
        let (x, y) = (p / m, q / m);
        let w: f64 = balls
            .iter()
            .filter(|(_, b)| b[x] && b[y])
            .map(|(i, _)| h[*i][x] * h[*i][y])
            .sum();
        dense[(p, q)] * w
    })
}

fn criterion_1() -> Outcome {
    let w0 = single_point_witness(1).unwrap();
    let space = interval(8);
    let cover = brick_cover(&space, 1.0, 4.0).unwrap();
    let w1 = build_upper_witness(space, &cover, 1.0, 1).unwrap();
    let start = Instant::now();
    let t0 = threshold_setup(&w0).unwrap().constants;
    let t1 = threshold_setup(&w1).unwrap().constants;
    let elapsed = start.elapsed();
    let bare = Instant::now();
    let (b0, b1) = (constants(0), constants(1));
    let bare_elapsed = bare.elapsed();
    let exact = t0.delta == 1.0 / 128.0
        && t0.eta == 1.0 / 8.0
        && t0.eps == 2f64.powi(-23)
        && t1.delta == 1.0 / 512.0
        && t1.eta == 1.0 / 16.0
        && b0 == t0
        && b1 == t1
        && w1.d == 1;
    outcome(
        exact && bare_elapsed < Duration::from_millis(1),
        format!(
            "d=0: delta={} eta={} eps={:e}; d=1: delta={} eta={}; constants in {:?}, threshold setups in {:?}",
            t0.delta, t0.eta, t0.eps, t1.delta, t1.eta, bare_elapsed, elapsed
        ),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let space = interval(LEN);
    let cover = brick_cover(&space, R, SIDE).unwrap();
    let w = interval_witness(R, SIDE, true);
    let rep = check_witness(&w, TOL).unwrap();
    let structural = [0, 2, 3, 4, 5].iter().all(|&k| rep[k].verdict);
    let reported = rep[1].worst;
    let oracle = w
        .test_set
        .iter()
        .map(|t| dense_norm(&(dense_round_trip(&space, &cover, R, &t.op) - t.op.to_dense())))
        .fold(0.0, f64::max);
    let oracle_ok = (oracle - reported).abs() <= 1e-9;
    let mut errors = Vec::new();
    for r in [5.0, 10.0, 20.0, 40.0] {
        let wr = interval_witness(r, SIDE.max(3.0 * r), false);
        errors.push(wr.approximation_errors().unwrap().iter().map(|e| e.1).fold(0.0, f64::max));
    }
    let finite = errors.iter().all(|e| e.is_finite());
    let monotone = errors.windows(2).all(|p| p[1] < p[0]);
    let elapsed = start.elapsed();
    outcome(
        structural && oracle_ok && finite && monotone && elapsed < Duration::from_secs(60),
        format!(
            "verdicts {:?}; error {reported:.6} (dense oracle {oracle:.6}); sweep r=5,10,20,40: {:?}; {:?}",
            rep.iter().map(|c| c.verdict).collect::<Vec<_>>(),
            errors,
            elapsed
        ),
    )
}

/// Exhaustive cover check written against the distance matrix directly.
fn brute_force_cover_ok(space: &FiniteMetricSpace, cover: &ColoredCover, r: f64) -> bool {
    let n = space.len();
    let covered = (0..n).all(|x| cover.families.iter().flatten().any(|s| s.contains(&x)));
    let separated = cover.families.iter().all(|fam| {
        fam.iter().enumerate().all(|(a, u)| {
            fam[a + 1..]
                .iter()
                .all(|v| u.iter().all(|&x| v.iter().all(|&y| space.dist(x, y) > r)))
        })
    });
    covered && separated
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let w = interval_witness(R, SIDE, true);
    let (_, _, ex) = extract_from_witness(&w, R).unwrap();
    let elapsed = start.elapsed();
    let brute = brute_force_cover_ok(&w.space, &ex.cover, R);
    let colors = ex.cover.families.iter().filter(|f| !f.is_empty()).count();
    outcome(
        ex.report.passes() && brute && colors <= 2 && ex.class_bound <= ex.s_max && elapsed < Duration::from_secs(120),
        format!(
            "cover at r=5 passes={} (brute force {}), colors {}, S={} s_max={}, gaps {:?}; {:?}",
            ex.report.passes(),
            brute,
            colors,
            ex.class_bound,
            ex.s_max,
            ex.report.min_same_color_gap,
            elapsed
        ),
    )
}

/// Small random witness: twisted by a diagonal unitary and with each color
/// of `φ` scaled by its own factor in `[1/2, 1]`.
fn random_small_witness(seed: u64) -> DiagDimWitness {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=2);
    let (space, r, side) = if rng.gen_bool(0.5) {
        let n = rng.gen_range(6..=20);
        let r = rng.gen_range(1..=2) as f64;
        let side = 3.0 * r + rng.gen_range(0..3) as f64;
        (interval(n), r, side)
    } else {
        let w = rng.gen_range(2..=4);
        let h = rng.gen_range(2..=5);
        (Arc::new(generate_space(&GridSpec::grid(&[w, h], Metric::Linf)).unwrap()), 1.0, rng.gen_range(3..=4) as f64)
    };
    let cover = if space.grid_spec().map_or(1, |g| g.sides.len()) == 1 {
        brick_cover(&space, r, side).unwrap()
    } else {
        // one set per color when the grid is too small for a brick wall
        let n = space.len();
        let half = n / 2;
        ColoredCover::new(&space, vec![vec![(0..half).collect()], vec![(half..n).collect()]], r).unwrap()
    };
    let base = build_upper_witness(space.clone(), &cover, r, m).unwrap().with_eps(1.0).unwrap();
    let u = random_diagonal_unitary(space.len(), m, seed ^ 0xABCD);
    let mut w = twisted(&base, &u).unwrap();
    let scales: Vec<f64> = (0..=w.d).map(|_| rng.gen_range(0.5..=1.0)).collect();
    let terms: Vec<Term> = w
        .phi
        .terms()
        .unwrap()
        .iter()
        .enumerate()
        .map(|(k, t)| Term {
            left: t.left.scale_real(scales[w.summand_colors[k]]),
            right: t.right.clone(),
        })
        .collect();
    w.phi = CpMap::structural(w.phi.domain.clone(), w.phi.codomain.clone(), terms).unwrap();
    w
}

/// Adjoint and product identities of the matrix units recomputed densely.
fn dense_identity_oracle(pts: &diagdim_core::extract::PartialTranslationSystem) -> f64 {
    let mut worst: f64 = 0.0;
    for c in &pts.corners {
        let s = c.corner.size();
        let f: Vec<Vec<DMatrix<C>>> = c.f.iter().map(|r| r.iter().map(|b| b.to_dense()).collect()).collect();
        let g: Vec<Vec<DMatrix<C>>> = c.g.iter().map(|r| r.iter().map(|b| b.to_dense()).collect()).collect();
        for k in 0..s {
            for l in 0..s {
                worst = worst.max(dense_norm(&(f[k][l].adjoint() - &f[l][k])));
                for m in 0..s {
                    worst = worst.max(dense_norm(&(&f[k][l] * &g[l][m] - &f[k][m])));
                    worst = worst.max(dense_norm(&(&g[k][l] * &f[l][m] - &f[k][m])));
                }
            }
        }
    }
    worst
}

fn criterion_4() -> Outcome {
    let w = interval_witness(R, SIDE, true);
    let td = threshold_setup(&w).unwrap();
    let pts = diagdim_core::extract::build_translation_system(&w, &td).unwrap();
    let main = matrix_unit_identities(&pts, IDENTITY_TOL).unwrap();
    let mut worst_random: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    let mut all = main.pass;
    for seed in 0..25u64 {
        let ws = random_small_witness(seed);
        let td = threshold_setup(&ws).unwrap();
        let pts = diagdim_core::extract::build_translation_system(&ws, &td).unwrap();
        let rep = matrix_unit_identities(&pts, IDENTITY_TOL).unwrap();
        let oracle = dense_identity_oracle(&pts);
        all &= rep.pass && oracle <= IDENTITY_TOL && pts.round_trip_ok();
        worst_random = worst_random.max(rep.worst.iter().copied().fold(0.0, f64::max));
        worst_oracle = worst_oracle.max(oracle);
    }
    outcome(
        all,
        format!(
            "interval witness worst {:?}; 25 random witnesses worst {worst_random:e} (dense oracle {worst_oracle:e})",
            main.worst
        ),
    )
}

fn criterion_5() -> Outcome {
    let w = interval_witness(R, SIDE, true);
    // the renormalization presumes ‖φψ(a) − a‖ < t on 𝓕 ∪ 𝓕²
    let mut pre: f64 = 0.0;
    for a in &w.test_set {
        for b in &w.test_set {
            let ab = a.op.mul(&b.op).unwrap();
            let back = w.phi.apply(&w.psi.apply(&ab).unwrap()).unwrap();
            pre = pre.max(back.dist(&ab).unwrap());
        }
    }
    let hat = hat_normalize(&w).unwrap();
    let t = hat.t;
    let eps_outer = 9.0 * t.sqrt();
    let approx_bound = eps_outer * eps_outer / 27.0;
    let mult_bound = 6.0 * (eps_outer * eps_outer / 81.0).sqrt();
    let approx = hat.approximation_worst();
    outcome(
        pre < t && approx < approx_bound && hat.multiplicativity < mult_bound && hat.relation_error <= 1e-9,
        format!(
            "t={t}: approximation {approx:.6} < {approx_bound:.6}, multiplicativity {:.6} < {mult_bound:.6} over 50 samples, relation error {:e}",
            hat.multiplicativity, hat.relation_error
        ),
    )
}

/// `φ(a) = U (⊕ a_k ⊗ H_k) U*` with positive `H_k`: order zero with
/// `h = U(⊕ 1 ⊗ H_k)U*` commuting with `π(a) = U(⊕ a_k ⊗ 1)U*`.
fn random_order_zero(seed: u64) -> (CpMap, DMatrix<C>, Vec<DMatrix<C>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..=2);
    let sizes: Vec<usize> = (0..k).map(|_| rng.gen_range(1..=3)).collect();
    let mults: Vec<usize> = (0..k).map(|_| rng.gen_range(1..=2)).collect();
    let used: usize = sizes.iter().zip(&mults).map(|(n, r)| n * r).sum();
    let big = used + rng.gen_range(0..=2);
    let u = random_unitary(&mut rng, big);
    let dom_alg = FiniteDimAlgebra::new(sizes.clone(), 1).unwrap();
    let slots = dom_alg.slots();
    let mut terms = Vec::new();
    let mut h = DMatrix::<C>::zeros(big, big);
    let mut embeds = Vec::new();
    let mut row = 0;
    for (kk, (&n, &r)) in sizes.iter().zip(&mults).enumerate() {
        // positive H_k, occasionally singular
        let q = random_unitary(&mut rng, r);
        let lam: Vec<f64> = (0..r)
            .map(|j| if j == 0 && rng.gen_bool(0.2) && r > 1 { 0.0 } else { rng.gen_range(0.1..1.0) })
            .collect();
        let hk = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(r, lam.iter().map(|&l| c(l)))) * q.adjoint();
        // rows row..row+n*r hold a_k ⊗ H_k in the basis (s, j) -> row + s*r + j
        let o = dom_alg.offset(kk);
        let mut emb = DMatrix::<C>::zeros(big, slots);
        for s in 0..n {
            emb[(row + s * r, o + s)] = c(1.0);
        }
        for j in 0..r {
            let mut kraus = DMatrix::<C>::zeros(big, slots);
            for s in 0..n {
                for jj in 0..r {
                    kraus[(row + s * r + jj, o + s)] = q[(jj, j)] * c(lam[j].sqrt());
                }
            }
            let left = &u * kraus;
            terms.push(Term::conjugation(BlockMatrix::from_dense(&left, 1, 1)));
        }
        for s in 0..n {
            for a in 0..r {
                for b in 0..r {
                    h[(row + s * r + a, row + s * r + b)] = hk[(a, b)];
                }
            }
        }
        embeds.push(emb);
        row += n * r;
    }
    let h = &u * h * u.adjoint();
    let cod = AlgebraDesc::Fd(FiniteDimAlgebra::new(vec![big], 1).unwrap());
    let phi = CpMap::structural(AlgebraDesc::Fd(dom_alg), cod, terms).unwrap();
    (phi, h, embeds)
}

fn criterion_6() -> Outcome {
    let mut worst_res: f64 = 0.0;
    let mut worst_mult: f64 = 0.0;
    let mut worst_h: f64 = 0.0;
    let mut ok = true;
    for seed in 0..100u64 {
        let (phi, h_true, _) = random_order_zero(seed);
        match factorize_order_zero(&phi) {
            Ok(fac) => {
                worst_res = worst_res.max(fac.residual);
                worst_mult = worst_mult.max(fac.multiplicativity);
                worst_h = worst_h.max(dense_norm(&(fac.h.to_dense() - &h_true)));
            }
            Err(_) => ok = false,
        }
    }
    outcome(
        ok && worst_res <= 1e-10 && worst_mult <= 1e-10 && worst_h <= 1e-10,
        format!("100 maps: residual {worst_res:e}, multiplicativity {worst_mult:e}, |h - h_true| {worst_h:e}"),
    )
}

fn transpose_map(n: usize) -> CpMap {
    let alg = AlgebraDesc::Fd(FiniteDimAlgebra::new(vec![n], 1).unwrap());
    let d = n * n;
    let mut t = DMatrix::zeros(d, d);
    for i in 0..n {
        for j in 0..n {
            t[(j * n + i, i * n + j)] = c(1.0);
        }
    }
    CpMap::dense(alg.clone(), alg, t).unwrap()
}

fn criterion_7() -> Outcome {
    let w = interval_witness(R, SIDE, true);
    let psi = choi_check(&w.psi, 4).unwrap();
    let phi = choi_check(&w.phi, 4).unwrap();
    let transposes: Vec<bool> = (2..=4).map(|n| choi_check(&transpose_map(n), n).unwrap().flag).collect();
    outcome(
        psi.min_eigenvalue >= -1e-10 && phi.min_eigenvalue >= -1e-10 && transposes.iter().all(|f| !f),
        format!(
            "psi min eig {:e} over {} windows, phi min eig {:e} over {} windows; transpose accepted: {:?}",
            psi.min_eigenvalue, psi.windows, phi.min_eigenvalue, phi.windows, transposes
        ),
    )
}

fn criterion_8() -> Outcome {
    let w = interval_witness(R, SIDE, true);
    let sum = direct_sum(&w, &single_point_witness(FIBER).unwrap()).unwrap();
    let rs = check_witness(&sum, TOL).unwrap();
    let ten = tensor_matrix(&w, 2).unwrap();
    let rt = check_witness(&ten, TOL).unwrap();
    let pass = sum.d == 1 && ten.d == w.d && rs.iter().all(|c| c.verdict) && rt.iter().all(|c| c.verdict);
    outcome(
        pass,
        format!(
            "direct sum d={} verdicts {:?} (error {:.6}); matrix amplification d={} verdicts {:?} (error {:.6})",
            sum.d,
            rs.iter().map(|c| c.verdict).collect::<Vec<_>>(),
            rs[1].worst,
            ten.d,
            rt.iter().map(|c| c.verdict).collect::<Vec<_>>(),
            rt[1].worst
        ),
    )
}

/// Order zero map from `F` (fiber 1) into the band algebra of an interval
/// with fiber 1: each summand is sent, with phases and a weight, onto one or
/// two disjoint sets of points.
fn random_diagonal_order_zero(seed: u64) -> CpMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..=3);
    let sizes: Vec<usize> = (0..k).map(|_| rng.gen_range(1..=4)).collect();
    let copies: Vec<usize> = (0..k).map(|_| rng.gen_range(1..=2)).collect();
    let need: usize = sizes.iter().zip(&copies).map(|(a, b)| a * b).sum();
    let n = need + rng.gen_range(0..=4);
    let space = interval(n);
    let mut points: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        points.swap(i, rng.gen_range(0..=i));
    }
    let alg = FiniteDimAlgebra::new(sizes.clone(), 1).unwrap();
    let slots = alg.slots();
    let mut next = 0;
    let mut terms = Vec::new();
    for (kk, (&s, &r)) in sizes.iter().zip(&copies).enumerate() {
        let weight = rng.gen_range(0.2..=1.0f64).sqrt();
        for _ in 0..r {
            let blocks: Vec<((usize, usize), Block)> = (0..s)
                .map(|t| {
                    let phase = C::from_polar(weight, rng.gen_range(0.0..std::f64::consts::TAU));
                    let x = points[next + t];
                    ((x, alg.offset(kk) + t), Block::from_element(1, 1, phase))
                })
                .collect();
            next += s;
            terms.push(Term::conjugation(BlockMatrix::from_blocks(n, slots, 1, 1, blocks)));
        }
    }
    let band = AlgebraDesc::Band { space, fiber: 1 };
    CpMap::structural(AlgebraDesc::Fd(alg), band, terms).unwrap()
}

fn criterion_9() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for seed in 0..50u64 {
        let phi = random_diagonal_order_zero(seed);
        let fac = factorize_order_zero(&phi).unwrap();
        let rep = cop_check(&fac, 1e-9).unwrap();
        ok &= rep.pass;
        worst = worst.max(rep.worst);
    }
    outcome(ok, format!("50 maps, worst commutator {worst:e}"))
}

/// Exhaustive injectivity check on the pair lists.
fn parts_injective(parts: &[Vec<(usize, usize)>]) -> bool {
    parts.iter().all(|p| {
        p.iter().enumerate().all(|(a, e)| {
            p[a + 1..].iter().all(|f| f.0 != e.0 && f.1 != e.1)
        })
    })
}

fn criterion_10() -> Outcome {
    let s = interval(5);
    let e = decompose_neighbors(&s, 1.0).unwrap();
    let small_ok = e.len() == 3 && parts_injective(&e.parts);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut bound_ok = true;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..40 {
        let dims = rng.gen_range(1..=2);
        let sides: Vec<usize> = (0..dims).map(|_| rng.gen_range(2..=9)).collect();
        let metric = if rng.gen_bool(0.5) { Metric::L1 } else { Metric::Linf };
        let spec = if dims == 1 { GridSpec::interval(sides[0]) } else { GridSpec::grid(&sides, metric) };
        let space = generate_space(&spec).unwrap();
        let r = rng.gen_range(0..=3) as f64;
        let e = decompose_neighbors(&space, r).unwrap();
        let n = ulf_profile(&space, &[r]).unwrap().at(r).unwrap();
        bound_ok &= e.len() <= 2 * n - 1 && parts_injective(&e.parts);
        worst_ratio = worst_ratio.max(e.len() as f64 / (2 * n - 1) as f64);
    }
    outcome(
        small_ok && bound_ok,
        format!("interval 0..4 at r=1: M={}; 40 random instances within 2N(r)-1 (max M/(2N-1) = {worst_ratio:.3})", e.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("constants", criterion_1),
        ("upper-bound witness", criterion_2),
        ("round trip to a cover", criterion_3),
        ("matrix-unit identities", criterion_4),
        ("renormalized maps", criterion_5),
        ("order zero factorization", criterion_6),
        ("Choi certification", criterion_7),
        ("permanence", criterion_8),
        ("commutation at abelian fiber", criterion_9),
        ("edge decomposition", criterion_10),
    ];
    let mut failed = Vec::new();
    for (k, (name, run)) in criteria.iter().enumerate() {
        let out = run();
        println!(
            "criterion {:>2} [{}] {}: {}",
            k + 1,
            if out.pass { "PASS" } else { "FAIL" },
            name,
            out.detail
        );
        if !out.pass {
            failed.push(k + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all 10 criteria pass");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
