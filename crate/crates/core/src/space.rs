//! Finite metric spaces, ball-size profiles and metric enlargements.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use num_rational::Rational64;
use num_traits::ToPrimitive;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance applied when comparing floating-point distances with a scale.
pub const FLOAT_DIST_TOL: f64 = 1e-12;

/// Point identifier. Serialized as a string; integers are accepted on input.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct PointId(pub String);

impl<'de> Deserialize<'de> for PointId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Str(String),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Int(i) => PointId(i.to_string()),
            Raw::Str(s) => PointId(s),
        })
    }
}

impl fmt::Display for PointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L1,
    #[default]
    Linf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Interval,
    Grid,
}

/// Parameters of a generated integer box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub family: Family,
    pub sides: Vec<usize>,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default = "default_spacing")]
    pub spacing: f64,
}

fn default_spacing() -> f64 {
    1.0
}

impl GridSpec {
    pub fn interval(len: usize) -> Self {
        Self {
            family: Family::Interval,
            sides: vec![len],
            metric: Metric::Linf,
            spacing: 1.0,
        }
    }

    pub fn grid(sides: &[usize], metric: Metric) -> Self {
        Self {
            family: Family::Grid,
            sides: sides.to_vec(),
            metric,
            spacing: 1.0,
        }
    }
}

/// Converts a double to the rational it denotes, when a small one exists.
pub(crate) fn exact_rational(x: f64) -> Option<Rational64> {
    let q = Rational64::approximate_float(x)?;
    (q.to_f64()? == x).then_some(q)
}

/// A comparison scale. Exact when the double converts to a small rational.
#[derive(Clone, Copy, Debug)]
pub struct Scale {
    pub value: f64,
    exact: Option<Rational64>,
}

impl Scale {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            exact: exact_rational(value),
        }
    }

    fn float_slack(&self) -> f64 {
        FLOAT_DIST_TOL * self.value.abs().max(1.0)
    }
}

impl From<f64> for Scale {
    fn from(v: f64) -> Self {
        Scale::new(v)
    }
}

#[derive(Clone, Debug)]
enum Distances {
    Exact(Vec<Rational64>),
    Float(Vec<f64>),
}

#[derive(Clone, Debug)]
struct GridInfo {
    spec: GridSpec,
    coords: Vec<Vec<i64>>,
}

/// A finite metric space with an exact distance matrix.
#[derive(Clone, Debug)]
pub struct FiniteMetricSpace {
    ids: Vec<PointId>,
    index: HashMap<PointId, usize>,
    dist: Distances,
    grid: Option<GridInfo>,
}

#[derive(Serialize, Deserialize)]
struct SpaceFile {
    points: Vec<PointId>,
    dist: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<GridSpec>,
}

impl FiniteMetricSpace {
    /// Builds a space from a floating-point distance matrix, validating the
    /// metric axioms.
    pub fn from_matrix(points: Vec<PointId>, dist: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        if dist.len() != n || dist.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidMetric(format!(
                "distance matrix must be {n}x{n}"
            )));
        }
        let flat: Vec<f64> = dist.into_iter().flatten().collect();
        let space = Self::assemble(points, Distances::Float(flat), None)?;
        space.validate()?;
        Ok(space)
    }

    fn assemble(ids: Vec<PointId>, dist: Distances, grid: Option<GridInfo>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidMetric(format!("duplicate point id {id}")));
            }
        }
        Ok(Self {
            ids,
            index,
            dist,
            grid,
        })
    }

    /// Checks symmetry, identity of indiscernibles and the triangle inequality.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let tol = |a: f64| FLOAT_DIST_TOL * a.abs().max(1.0);
        for x in 0..n {
            for y in 0..n {
                let d = self.dist(x, y);
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::InvalidMetric(format!(
                        "dist({},{}) = {d} is not a finite nonnegative number",
                        self.ids[x], self.ids[y]
                    )));
                }
                if (d - self.dist(y, x)).abs() > tol(d) {
                    return Err(Error::InvalidMetric(format!(
                        "asymmetric at ({},{})",
                        self.ids[x], self.ids[y]
                    )));
                }
                if (x == y) != (d == 0.0) {
                    return Err(Error::InvalidMetric(format!(
                        "dist({},{}) = {d} violates dist(x,y)=0 iff x=y",
                        self.ids[x], self.ids[y]
                    )));
                }
            }
        }
        for x in 0..n {
            for y in 0..n {
                let dxy = self.dist(x, y);
                for z in 0..n {
                    let lhs = self.dist(x, z);
                    if lhs > dxy + self.dist(y, z) + tol(lhs) {
                        return Err(Error::InvalidMetric(format!(
                            "triangle inequality fails for ({},{},{})",
                            self.ids[x], self.ids[y], self.ids[z]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[PointId] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &PointId {
        &self.ids[i]
    }

    pub fn index_of(&self, id: &PointId) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownPoint(id.0.clone()))
    }

    pub fn grid_spec(&self) -> Option<&GridSpec> {
        self.grid.as_ref().map(|g| &g.spec)
    }

    /// Integer box coordinates of a point of a generated grid.
    pub fn coords(&self, i: usize) -> Option<&[i64]> {
        self.grid.as_ref().map(|g| g.coords[i].as_slice())
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.dist, Distances::Exact(_))
    }

    pub fn dist(&self, x: usize, y: usize) -> f64 {
        let k = x * self.len() + y;
        match &self.dist {
            Distances::Exact(d) => d[k].to_f64().unwrap_or(f64::NAN),
            Distances::Float(d) => d[k],
        }
    }

    /// `dist(x, y) <= r`.
    pub fn within(&self, x: usize, y: usize, r: &Scale) -> bool {
        let k = x * self.len() + y;
        match (&self.dist, r.exact) {
            (Distances::Exact(d), Some(q)) => d[k] <= q,
            _ => self.dist(x, y) <= r.value + r.float_slack(),
        }
    }

    /// `dist(x, y) > r`, the strict separation used by covers.
    pub fn separated(&self, x: usize, y: usize, r: &Scale) -> bool {
        !self.within(x, y, r)
    }

    /// Distance between two point sets (infinite when either is empty).
    pub fn set_distance(&self, a: &[usize], b: &[usize]) -> f64 {
        let mut best = f64::INFINITY;
        for &x in a {
            for &y in b {
                best = best.min(self.dist(x, y));
            }
        }
        best
    }

    /// True when every pair across the two sets is more than `r` apart.
    pub fn sets_separated(&self, a: &[usize], b: &[usize], r: &Scale) -> bool {
        a.iter()
            .all(|&x| b.iter().all(|&y| self.separated(x, y, r)))
    }

    pub fn diameter_of(&self, set: &[usize]) -> f64 {
        let mut best: f64 = 0.0;
        for (i, &x) in set.iter().enumerate() {
            for &y in &set[i + 1..] {
                best = best.max(self.dist(x, y));
            }
        }
        best
    }

    pub fn diameter(&self) -> f64 {
        let all: Vec<usize> = (0..self.len()).collect();
        self.diameter_of(&all)
    }

    /// Disjoint union; the two parts sit at a constant distance exceeding
    /// both diameters, which keeps the triangle inequality.
    pub fn disjoint_union(&self, other: &Self) -> Result<Self> {
        let gap = self.diameter().max(other.diameter()) + 1.0;
        let (n1, n2) = (self.len(), other.len());
        let n = n1 + n2;
        let ids: Vec<PointId> = self
            .ids
            .iter()
            .map(|p| PointId(format!("L:{p}")))
            .chain(other.ids.iter().map(|p| PointId(format!("R:{p}"))))
            .collect();
        let exact = self.is_exact() && other.is_exact();
        let at = |i: usize, j: usize| -> (f64, Option<Rational64>) {
            let (d, q) = match (i < n1, j < n1) {
                (true, true) => (self.dist(i, j), self.exact_at(i, j)),
                (false, false) => (
                    other.dist(i - n1, j - n1),
                    other.exact_at(i - n1, j - n1),
                ),
                _ => (gap, exact_rational(gap)),
            };
            (d, q)
        };
        let dist = if exact && exact_rational(gap).is_some() {
            let mut v = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    v.push(at(i, j).1.expect("exact parts"));
                }
            }
            Distances::Exact(v)
        } else {
            let mut v = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    v.push(at(i, j).0);
                }
            }
            Distances::Float(v)
        };
        Self::assemble(ids, dist, None)
    }

    /// The product `X x {0..n-1}` with `d((x,i),(y,j)) = d(x,y) + [i != j]`.
    /// Points are ordered copy-major: index `i * |X| + x`.
    pub fn with_copies(&self, copies: usize) -> Result<Self> {
        if copies == 0 {
            return Err(Error::InvalidParameter("copies must be >= 1".into()));
        }
        let m = self.len();
        let n = m * copies;
        let ids: Vec<PointId> = (0..copies)
            .flat_map(|c| self.ids.iter().map(move |p| PointId(format!("{p}#{c}"))))
            .collect();
        let one = Rational64::from_integer(1);
        let dist = match &self.dist {
            Distances::Exact(d) => {
                let mut v = Vec::with_capacity(n * n);
                for a in 0..n {
                    for b in 0..n {
                        let extra = if a / m != b / m { one } else { Rational64::from_integer(0) };
                        v.push(d[(a % m) * m + b % m] + extra);
                    }
                }
                Distances::Exact(v)
            }
            Distances::Float(d) => {
                let mut v = Vec::with_capacity(n * n);
                for a in 0..n {
                    for b in 0..n {
                        let extra = if a / m != b / m { 1.0 } else { 0.0 };
                        v.push(d[(a % m) * m + b % m] + extra);
                    }
                }
                Distances::Float(v)
            }
        };
        Self::assemble(ids, dist, None)
    }

    fn exact_at(&self, x: usize, y: usize) -> Option<Rational64> {
        match &self.dist {
            Distances::Exact(d) => Some(d[x * self.len() + y]),
            Distances::Float(_) => None,
        }
    }

    /// Relabels points by a permutation: new point `i` is old point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        if perm.len() != n || perm.iter().copied().collect::<BTreeSet<_>>().len() != n {
            return Err(Error::InvalidParameter("not a permutation".into()));
        }
        let ids = perm.iter().map(|&p| self.ids[p].clone()).collect();
        let dist = match &self.dist {
            Distances::Exact(d) => Distances::Exact(
                (0..n * n)
                    .map(|k| d[perm[k / n] * n + perm[k % n]])
                    .collect(),
            ),
            Distances::Float(d) => Distances::Float(
                (0..n * n)
                    .map(|k| d[perm[k / n] * n + perm[k % n]])
                    .collect(),
            ),
        };
        Self::assemble(ids, dist, None)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let n = self.len();
        let file = SpaceFile {
            points: self.ids.clone(),
            dist: (0..n)
                .map(|x| (0..n).map(|y| self.dist(x, y)).collect())
                .collect(),
            grid: self.grid_spec().cloned(),
        };
        serde_json::to_value(file).expect("space serializes")
    }

    /// Loads a space file. When grid metadata is present the exact distances
    /// are regenerated and checked against the stored matrix.
    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let file: SpaceFile = serde_json::from_value(value)?;
        match file.grid {
            Some(spec) => {
                let space = generate_space(&spec)?;
                if space.ids != file.points {
                    return Err(Error::InvalidMetric(
                        "grid metadata does not match point list".into(),
                    ));
                }
                let n = space.len();
                for x in 0..n {
                    for y in 0..n {
                        let stored = file.dist.get(x).and_then(|r| r.get(y)).copied();
                        let want = space.dist(x, y);
                        if stored.map_or(true, |s| (s - want).abs() > FLOAT_DIST_TOL * want.max(1.0)) {
                            return Err(Error::InvalidMetric(
                                "grid metadata does not match distance matrix".into(),
                            ));
                        }
                    }
                }
                Ok(space)
            }
            None => Self::from_matrix(file.points, file.dist),
        }
    }
}

/// Generates an integer box with the chosen metric.
pub fn generate_space(spec: &GridSpec) -> Result<FiniteMetricSpace> {
    if spec.sides.is_empty() {
        return Err(Error::InvalidParameter("at least one dimension required".into()));
    }
    if spec.family == Family::Interval && spec.sides.len() != 1 {
        return Err(Error::InvalidParameter("an interval has exactly one side".into()));
    }
    if spec.sides.iter().any(|&s| s == 0) {
        return Err(Error::InvalidParameter("zero-size dimension".into()));
    }
    if !(spec.spacing > 0.0) || !spec.spacing.is_finite() {
        return Err(Error::InvalidParameter("spacing must be positive".into()));
    }
    let spacing = exact_rational(spec.spacing).ok_or_else(|| {
        Error::InvalidParameter(format!("spacing {} has no exact rational form", spec.spacing))
    })?;
    let total: usize = spec.sides.iter().product();
    let mut coords = Vec::with_capacity(total);
    for mut k in 0..total {
        let mut c = vec![0i64; spec.sides.len()];
        for axis in (0..spec.sides.len()).rev() {
            c[axis] = (k % spec.sides[axis]) as i64;
            k /= spec.sides[axis];
        }
        coords.push(c);
    }
    let ids = coords
        .iter()
        .map(|c| {
            if spec.family == Family::Interval {
                PointId(c[0].to_string())
            } else {
                let parts: Vec<String> = c.iter().map(|v| v.to_string()).collect();
                PointId(format!("({})", parts.join(",")))
            }
        })
        .collect();
    let mut dist = Vec::with_capacity(total * total);
    for a in &coords {
        for b in &coords {
            let steps = a.iter().zip(b).map(|(x, y)| (x - y).abs());
            let raw = match spec.metric {
                Metric::L1 => steps.sum::<i64>(),
                Metric::Linf => steps.max().unwrap_or(0),
            };
            dist.push(spacing * raw);
        }
    }
    FiniteMetricSpace::assemble(
        ids,
        Distances::Exact(dist),
        Some(GridInfo {
            spec: spec.clone(),
            coords,
        }),
    )
}

/// Maximum ball cardinality `N(r)` for each requested radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UlfProfile {
    pub entries: Vec<(f64, usize)>,
}

impl UlfProfile {
    pub fn at(&self, r: f64) -> Option<usize> {
        self.entries.iter().find(|(q, _)| *q == r).map(|e| e.1)
    }
}

pub fn ulf_profile(space: &FiniteMetricSpace, radii: &[f64]) -> Result<UlfProfile> {
    if radii.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::InvalidParameter("radii must be nonnegative".into()));
    }
    let entries = radii
        .iter()
        .map(|&r| {
            let s = Scale::new(r);
            let n = (0..space.len())
                .map(|x| (0..space.len()).filter(|&y| space.within(x, y, &s)).count())
                .max()
                .unwrap_or(0);
            (r, n)
        })
        .collect();
    Ok(UlfProfile { entries })
}

/// `{x : dist(x, subset) <= r}`, sorted.
pub fn enlarge(space: &FiniteMetricSpace, subset: &[usize], r: f64) -> Vec<usize> {
    let s = Scale::new(r);
    (0..space.len())
        .filter(|&x| subset.iter().any(|&u| space.within(x, u, &s)))
        .collect()
}
