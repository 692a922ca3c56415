//! Colored covers at a scale: brick constructions, verification and a small
//! exact search for the minimal number of colors.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{FiniteMetricSpace, PointId, Scale};

/// `families[i]` holds the sets of color `i`; each set is a sorted list of
/// point indices.
#[derive(Clone, Debug, PartialEq)]
pub struct ColoredCover {
    pub families: Vec<Vec<Vec<usize>>>,
    pub scale_r: f64,
    pub diam_bound: f64,
}

impl ColoredCover {
    /// Normalizes the sets (sorted, deduplicated, empty ones dropped) and
    /// computes the diameter bound.
    pub fn new(space: &FiniteMetricSpace, families: Vec<Vec<Vec<usize>>>, r: f64) -> Result<Self> {
        let mut out = Vec::with_capacity(families.len());
        for fam in families {
            let mut sets = Vec::with_capacity(fam.len());
            for mut set in fam {
                if let Some(&bad) = set.iter().find(|&&x| x >= space.len()) {
                    return Err(Error::UnknownPoint(format!("index {bad}")));
                }
                set.sort_unstable();
                set.dedup();
                if !set.is_empty() {
                    sets.push(set);
                }
            }
            sets.sort();
            out.push(sets);
        }
        let diam_bound = out
            .iter()
            .flatten()
            .map(|s| space.diameter_of(s))
            .fold(0.0, f64::max);
        Ok(Self {
            families: out,
            scale_r: r,
            diam_bound,
        })
    }

    pub fn colors(&self) -> usize {
        self.families.len()
    }

    /// Number of colors minus one.
    pub fn d(&self) -> usize {
        self.families.len().saturating_sub(1)
    }

    pub fn to_json(&self, space: &FiniteMetricSpace) -> serde_json::Value {
        let fams: Vec<Vec<Vec<PointId>>> = self
            .families
            .iter()
            .map(|f| {
                f.iter()
                    .map(|s| s.iter().map(|&x| space.id(x).clone()).collect())
                    .collect()
            })
            .collect();
        serde_json::json!({ "r": self.scale_r, "families": fams })
    }

    pub fn from_json(value: &serde_json::Value, space: &FiniteMetricSpace) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            r: f64,
            families: Vec<Vec<Vec<PointId>>>,
        }
        let file: File = serde_json::from_value(value.clone())?;
        let mut fams = Vec::with_capacity(file.families.len());
        for f in &file.families {
            let mut sets = Vec::with_capacity(f.len());
            for s in f {
                sets.push(
                    s.iter()
                        .map(|id| space.index_of(id))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            fams.push(sets);
        }
        Self::new(space, fams, file.r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverReport {
    pub covers: bool,
    pub uncovered: Vec<PointId>,
    /// Minimum distance between distinct same-color sets; `None` when a
    /// color has fewer than two sets.
    pub min_same_color_gap: Vec<Option<f64>>,
    pub separated: Vec<bool>,
    pub max_diameter: f64,
    pub colors: usize,
}

impl CoverReport {
    pub fn passes(&self) -> bool {
        self.covers && self.separated.iter().all(|&s| s)
    }
}

pub fn verify_cover(cover: &ColoredCover, space: &FiniteMetricSpace, r: f64) -> CoverReport {
    let scale = Scale::new(r);
    let mut hit = vec![false; space.len()];
    for &x in cover.families.iter().flatten().flatten() {
        hit[x] = true;
    }
    let uncovered: Vec<PointId> = hit
        .iter()
        .enumerate()
        .filter(|(_, &h)| !h)
        .map(|(x, _)| space.id(x).clone())
        .collect();

    let mut gaps = Vec::with_capacity(cover.colors());
    let mut separated = Vec::with_capacity(cover.colors());
    for fam in &cover.families {
        let pairs: Vec<(usize, usize)> = (0..fam.len())
            .flat_map(|a| (a + 1..fam.len()).map(move |b| (a, b)))
            .collect();
        let (gap, ok) = pairs
            .par_iter()
            .map(|&(a, b)| {
                (
                    space.set_distance(&fam[a], &fam[b]),
                    space.sets_separated(&fam[a], &fam[b], &scale),
                )
            })
            .reduce(|| (f64::INFINITY, true), |x, y| (x.0.min(y.0), x.1 && y.1));
        gaps.push(gap.is_finite().then_some(gap));
        separated.push(ok);
    }
    let max_diameter = cover
        .families
        .iter()
        .flatten()
        .map(|s| space.diameter_of(s))
        .fold(0.0, f64::max);
    CoverReport {
        covers: uncovered.is_empty(),
        uncovered,
        min_same_color_gap: gaps,
        separated,
        max_diameter,
        colors: cover.colors(),
    }
}

/// Brick cover of a generated grid at separation scale `r`.
///
/// One dimension alternates bricks of side `brick_side`. Two dimensions use a
/// staggered brick wall (odd rows shifted by half a brick) with three colors.
/// Three or more dimensions color points by their depth near the skeleta of
/// the cube lattice, which needs a larger brick side than `2r`.
pub fn brick_cover(space: &FiniteMetricSpace, r: f64, brick_side: f64) -> Result<ColoredCover> {
    let spec = space
        .grid_spec()
        .ok_or_else(|| Error::InvalidParameter("brick covers need a generated grid".into()))?;
    if !(r >= 0.0) {
        return Err(Error::InvalidParameter("r must be nonnegative".into()));
    }
    if !(brick_side > 2.0 * r) {
        return Err(Error::InvalidParameter(format!(
            "brick side {brick_side} must exceed 2r = {}",
            2.0 * r
        )));
    }
    let dim = spec.sides.len();
    let side = (brick_side / spec.spacing + 1e-9).floor() as i64;
    if side < 1 {
        return Err(Error::InvalidParameter("brick side is below the grid spacing".into()));
    }
    let coords = |x: usize| space.coords(x).expect("generated grid has coordinates");

    let mut groups: BTreeMap<(usize, Vec<i64>), Vec<usize>> = BTreeMap::new();
    match dim {
        1 => {
            for x in 0..space.len() {
                let k = coords(x)[0].div_euclid(side);
                groups.entry((k.rem_euclid(2) as usize, vec![k])).or_default().push(x);
            }
        }
        2 => {
            let half = side / 2;
            for x in 0..space.len() {
                let c = coords(x);
                let row = c[1].div_euclid(side);
                let odd = row.rem_euclid(2);
                let k = (c[0] - odd * half).div_euclid(side);
                let color = (2 * k + odd).rem_euclid(3) as usize;
                groups.entry((color, vec![row, k])).or_default().push(x);
            }
        }
        _ => {
            let rho = (r / spec.spacing + 1e-9).floor() as i64;
            let first = (rho + 1) / 2;
            let need = 2 * first + (2 * dim as i64 - 1) * rho + 1;
            if side <= need {
                return Err(Error::InvalidParameter(format!(
                    "in {dim} dimensions the brick side must exceed {} grid steps",
                    need
                )));
            }
            let thresholds: Vec<i64> = (0..dim as i64).map(|j| first + j * rho).collect();
            for x in 0..space.len() {
                let (color, key) = skeleton_key(coords(x), side, &thresholds);
                groups.entry((color, key)).or_default().push(x);
            }
        }
    }

    let mut families: Vec<Vec<Vec<usize>>> = vec![Vec::new(); dim + 1];
    for ((color, _), set) in groups {
        families[color].push(set);
    }
    families.retain(|f| !f.is_empty());
    ColoredCover::new(space, families, r)
}

/// Color and group key of a lattice point for the skeleton construction.
fn skeleton_key(c: &[i64], side: i64, thresholds: &[i64]) -> (usize, Vec<i64>) {
    let dim = c.len();
    // distance to the nearest cube face along each axis, and that face
    let near: Vec<(i64, i64)> = c
        .iter()
        .map(|&v| {
            let a = v.rem_euclid(side);
            let cube = v.div_euclid(side);
            if a <= side - 1 - a {
                (a, cube)
            } else {
                (side - 1 - a, cube + 1)
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by_key(|&i| (near[i].0, i));
    let color = (1..=dim)
        .rev()
        .find(|&j| near[order[j - 1]].0 <= thresholds[j - 1])
        .unwrap_or(0);
    let mut close = vec![false; dim];
    for &i in &order[..color] {
        close[i] = true;
    }
    let mut key = Vec::with_capacity(2 * dim);
    for i in 0..dim {
        if close[i] {
            key.push(1);
            key.push(near[i].1);
        } else {
            key.push(0);
            key.push(c[i].div_euclid(side));
        }
    }
    (color, key)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchMode {
    Exact,
    Greedy,
}

/// Largest space accepted by the exact search.
pub const EXACT_SEARCH_LIMIT: usize = 64;

/// Minimal number of colors (minus one) for a cover by sets of diameter at
/// most `big_r` whose same-color members are more than `r` apart. Returns
/// `None` when no cover with at most `max_colors` colors exists (exact mode)
/// or the greedy cover needs more.
pub fn min_colors_search(
    space: &FiniteMetricSpace,
    r: f64,
    big_r: f64,
    max_colors: usize,
    mode: SearchMode,
) -> Result<Option<(usize, ColoredCover)>> {
    let n = space.len();
    if n == 0 {
        return Err(Error::InvalidParameter("empty space".into()));
    }
    let search = ColorSearch {
        space,
        near: Scale::new(r),
        bound: Scale::new(big_r),
    };
    let assignment = match mode {
        SearchMode::Exact => {
            if n > EXACT_SEARCH_LIMIT {
                return Err(Error::SizeLimit(format!(
                    "exact search handles at most {EXACT_SEARCH_LIMIT} points, got {n}; use greedy mode"
                )));
            }
            let mut found = None;
            for k in 1..=max_colors {
                let mut color = vec![usize::MAX; n];
                if search.backtrack(0, k, 0, &mut color) {
                    found = Some(color);
                    break;
                }
            }
            found
        }
        SearchMode::Greedy => {
            let mut color = vec![usize::MAX; n];
            let mut used = 0;
            for p in 0..n {
                let c = (0..used)
                    .find(|&c| search.fits(p, c, &mut color))
                    .unwrap_or(used);
                color[p] = c;
                used = used.max(c + 1);
            }
            (used <= max_colors).then_some(color)
        }
    };
    let Some(color) = assignment else {
        return Ok(None);
    };
    let cover = search.cover_from(&color, r)?;
    Ok(Some((cover.d(), cover)))
}

struct ColorSearch<'a> {
    space: &'a FiniteMetricSpace,
    near: Scale,
    bound: Scale,
}

impl ColorSearch<'_> {
    /// r-chain component of `p` inside its color class.
    fn component(&self, p: usize, color: &[usize]) -> Vec<usize> {
        let c = color[p];
        let mut seen = vec![false; color.len()];
        seen[p] = true;
        let mut stack = vec![p];
        let mut comp = Vec::new();
        while let Some(x) = stack.pop() {
            comp.push(x);
            for y in 0..color.len() {
                if !seen[y] && color[y] == c && self.space.within(x, y, &self.near) {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
        comp
    }

    fn fits(&self, p: usize, c: usize, color: &mut [usize]) -> bool {
        let old = color[p];
        color[p] = c;
        let comp = self.component(p, color);
        color[p] = old;
        comp.iter().enumerate().all(|(i, &x)| {
            comp[i + 1..]
                .iter()
                .all(|&y| self.space.within(x, y, &self.bound))
        })
    }

    fn backtrack(&self, p: usize, k: usize, used: usize, color: &mut Vec<usize>) -> bool {
        if p == color.len() {
            return true;
        }
        for c in 0..k.min(used + 1) {
            if self.fits(p, c, color) {
                color[p] = c;
                if self.backtrack(p + 1, k, used.max(c + 1), color) {
                    return true;
                }
                color[p] = usize::MAX;
            }
        }
        false
    }

    fn cover_from(&self, color: &[usize], r: f64) -> Result<ColoredCover> {
        let k = color.iter().max().map_or(0, |m| m + 1);
        let mut families = vec![Vec::new(); k];
        let mut done = vec![false; color.len()];
        for p in 0..color.len() {
            if !done[p] {
                let comp = self.component(p, color);
                for &x in &comp {
                    done[x] = true;
                }
                families[color[p]].push(comp);
            }
        }
        ColoredCover::new(self.space, families, r)
    }
}
