//! Shifted dyadic lattices on the line, cubes and their dilates, maximal-cube
//! selection, and verifiers for stopping and sparse collections.
//!
//! A lattice cube of level `s` and anchor `a` is `shift + [a 2^s, (a + 1) 2^s)`.
//! Everything that touches samples goes through [`LatticeGrid`], which pins a
//! lattice to a [`Grid`] whose step is a power of two no larger than the finest
//! lattice level, so cube boundaries fall on cell boundaries and containment is
//! integer arithmetic on cell indices.
//!
//! Cubes at the grid's own resolution (one cell wide) are treated specially: a
//! dilate of such a cube is the cube itself. The grid cannot see structure
//! below one cell, and this is what lets the maximal cubes of a cell set cover
//! that set exactly (see [`whitney_cover`]).

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{domain, Error, Result};
use crate::grid::{Grid, GridRegion};

/// Dyadic lattice `shift + 2^s Z` restricted to levels `s_min..=s_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyadicLattice {
    pub shift: f64,
    pub s_min: i32,
    pub s_max: i32,
}

impl DyadicLattice {
    pub fn new(shift: f64, s_min: i32, s_max: i32) -> Result<Self> {
        if s_min > s_max {
            return domain(format!("empty level range [{s_min}, {s_max}]"));
        }
        if !shift.is_finite() {
            return domain("lattice shift must be finite");
        }
        Ok(Self {
            shift,
            s_min,
            s_max,
        })
    }

    /// Level-`s` cube containing the real point `x`.
    pub fn cube_at(&self, x: f64, level: i32) -> Cube {
        let side = 2f64.powi(level);
        Cube::new(level, ((x - self.shift) / side).floor() as i64)
    }

    /// The coarsest cube containing the origin.
    pub fn top_cube(&self) -> Cube {
        self.cube_at(0.0, self.s_max)
    }

    pub fn lower(&self, q: Cube) -> f64 {
        self.shift + q.anchor as f64 * q.side()
    }

    pub fn upper(&self, q: Cube) -> f64 {
        self.shift + (q.anchor + 1) as f64 * q.side()
    }

    pub fn region(&self, q: Cube) -> GridRegion {
        GridRegion::interval(self.lower(q), self.upper(q)).expect("cube sides are positive")
    }
}

/// Dyadic interval of side `2^level`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cube {
    pub level: i32,
    pub anchor: i64,
}

impl Cube {
    pub fn new(level: i32, anchor: i64) -> Self {
        Self { level, anchor }
    }

    pub fn side(&self) -> f64 {
        2f64.powi(self.level)
    }

    pub fn measure(&self) -> f64 {
        self.side()
    }

    pub fn parent(&self) -> Cube {
        Cube::new(self.level + 1, self.anchor.div_euclid(2))
    }

    pub fn children(&self) -> [Cube; 2] {
        [
            Cube::new(self.level - 1, 2 * self.anchor),
            Cube::new(self.level - 1, 2 * self.anchor + 1),
        ]
    }

    /// Whether `other` is contained in `self` (non-strict).
    pub fn contains(&self, other: &Cube) -> bool {
        if other.level > self.level {
            return false;
        }
        other.anchor >> (self.level - other.level) == self.anchor
    }

    /// Level-descending, then anchor-ascending.
    pub fn canonical_cmp(&self, other: &Cube) -> Ordering {
        other
            .level
            .cmp(&self.level)
            .then(self.anchor.cmp(&other.anchor))
    }
}

impl fmt::Display for Cube {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.level, self.anchor)
    }
}

impl FromStr for Cube {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("cube encoding must be \"level:anchor\", got {s:?}"));
        let (l, a) = s.split_once(':').ok_or_else(bad)?;
        Ok(Cube::new(
            l.trim().parse().map_err(|_| bad())?,
            a.trim().parse().map_err(|_| bad())?,
        ))
    }
}

impl Serialize for Cube {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Cube {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

pub fn sort_canonical(cubes: &mut [Cube]) {
    cubes.sort_by(Cube::canonical_cmp);
}

/// Dilate `λQ`: same center, side `λ 2^s`.
pub fn dilate(lattice: &DyadicLattice, q: Cube, lambda: f64) -> Result<GridRegion> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return domain(format!("dilation factor must be positive, got {lambda}"));
    }
    let center = lattice.lower(q) + 0.5 * q.side();
    let half = 0.5 * lambda * q.side();
    GridRegion::interval(center - half, center + half)
}

/// Set of cells of a one-dimensional grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellSet {
    mask: Vec<bool>,
}

impl CellSet {
    pub fn empty(len: usize) -> Self {
        Self {
            mask: vec![false; len],
        }
    }

    pub fn from_range(len: usize, range: Range<usize>) -> Self {
        let mut s = Self::empty(len);
        s.insert_range(range);
        s
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::empty(len);
        for i in indices {
            s.mask[i] = true;
        }
        s
    }

    pub fn from_mask(mask: Vec<bool>) -> Self {
        Self { mask }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&b| b)
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn contains(&self, i: usize) -> bool {
        self.mask.get(i).copied().unwrap_or(false)
    }

    pub fn insert(&mut self, i: usize) {
        self.mask[i] = true;
    }

    pub fn insert_range(&mut self, range: Range<usize>) {
        let end = range.end.min(self.mask.len());
        for b in &mut self.mask[range.start.min(end)..end] {
            *b = true;
        }
    }

    pub fn remove_range(&mut self, range: Range<usize>) {
        let end = range.end.min(self.mask.len());
        for b in &mut self.mask[range.start.min(end)..end] {
            *b = false;
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn count_in(&self, range: Range<usize>) -> usize {
        self.mask[range].iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn union_with(&mut self, other: &CellSet) {
        for (a, b) in self.mask.iter_mut().zip(&other.mask) {
            *a |= *b;
        }
    }

    pub fn is_subset(&self, other: &CellSet) -> bool {
        self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }

    /// Maximal runs of consecutive member cells.
    pub fn runs(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = None;
        for (i, &b) in self.mask.iter().enumerate() {
            match (b, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    out.push(s..i);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push(s..self.mask.len());
        }
        out
    }
}

/// A lattice pinned to a grid whose cells are lattice cubes of level `cell_level`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatticeGrid {
    grid: Grid,
    lattice: DyadicLattice,
    cell_level: i32,
    origin: i64,
}

impl LatticeGrid {
    pub fn new(grid: Grid, lattice: DyadicLattice) -> Result<Self> {
        if grid.dim() != 1 {
            return domain("dyadic machinery runs on one-dimensional grids");
        }
        let h = grid.step();
        let cell_level = h.log2().round() as i32;
        if 2f64.powi(cell_level) != h {
            return domain(format!("grid step {h} is not a power of two"));
        }
        if cell_level > lattice.s_min {
            return domain(format!(
                "grid cells (level {cell_level}) are coarser than the finest lattice level {}",
                lattice.s_min
            ));
        }
        let t = (lattice.shift + grid.half_width()) / h;
        if t.fract() != 0.0 {
            return domain(format!(
                "lattice shift {} does not fall on a cell boundary",
                lattice.shift
            ));
        }
        Ok(Self {
            grid,
            lattice,
            cell_level,
            origin: t as i64,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn lattice(&self) -> &DyadicLattice {
        &self.lattice
    }

    pub fn cell_level(&self) -> i32 {
        self.cell_level
    }

    pub fn cells(&self) -> usize {
        self.grid.cells()
    }

    /// Number of cells along a side of a level-`s` cube.
    pub fn width(&self, level: i32) -> i64 {
        1i64 << (level - self.cell_level)
    }

    /// Unclipped cell range `[start, end)` of a cube.
    pub fn cube_cells(&self, q: Cube) -> (i64, i64) {
        let w = self.width(q.level);
        let start = self.origin + q.anchor * w;
        (start, start + w)
    }

    /// Whether a cube lies entirely inside the grid.
    pub fn in_grid(&self, q: Cube) -> bool {
        let (a, b) = self.cube_cells(q);
        a >= 0 && b <= self.cells() as i64
    }

    /// Cell range of a cube clipped to the grid.
    pub fn cube_span(&self, q: Cube) -> Range<usize> {
        clip(self.cube_cells(q), self.cells())
    }

    /// Unclipped cells of `λQ`; cell-level cubes dilate to themselves.
    ///
    /// `λ` must make the dilate land on cell boundaries, which holds for odd
    /// `λ` and for any `λ` once the cube is at least two cells wide.
    pub fn dilate_cells(&self, q: Cube, lambda: u32) -> (i64, i64) {
        let (a, b) = self.cube_cells(q);
        let w = b - a;
        if w == 1 || lambda <= 1 {
            return (a, b);
        }
        let grow = (lambda as i64 - 1) * w;
        debug_assert!(grow % 2 == 0, "dilate not aligned to cells");
        (a - grow / 2, b + grow / 2)
    }

    /// Cells of `λQ` clipped to the grid.
    pub fn dilate_span(&self, q: Cube, lambda: u32) -> Range<usize> {
        clip(self.dilate_cells(q, lambda), self.cells())
    }

    /// Level-`s` cube containing cell `k`.
    pub fn cube_of_cell(&self, k: usize, level: i32) -> Cube {
        Cube::new(
            level,
            (k as i64 - self.origin).div_euclid(self.width(level)),
        )
    }

    pub fn top_cube(&self) -> Cube {
        self.lattice.top_cube()
    }

    /// Cube measure from its cell count.
    pub fn measure(&self, q: Cube) -> f64 {
        self.width(q.level) as f64 * self.grid.step()
    }

    /// Anchors of level-`s` cubes lying inside the grid.
    fn anchors_in_grid(&self, level: i32) -> Range<i64> {
        let w = self.width(level);
        let n = self.cells() as i64;
        let lo = (-self.origin).div_euclid(w) + i64::from((-self.origin).rem_euclid(w) != 0);
        let hi = (n - self.origin).div_euclid(w);
        lo..hi.max(lo)
    }
}

pub(crate) fn clip((a, b): (i64, i64), n: usize) -> Range<usize> {
    let n = n as i64;
    let a = a.clamp(0, n) as usize;
    let b = b.clamp(0, n) as usize;
    a..b.max(a)
}

fn prefix_counts(set: &CellSet) -> Vec<u32> {
    let mut p = Vec::with_capacity(set.len() + 1);
    p.push(0u32);
    let mut acc = 0;
    for &b in set.mask() {
        acc += u32::from(b);
        p.push(acc);
    }
    p
}

/// All lattice cubes `L` with `factor·L ⊆ E`, maximal under inclusion, in
/// canonical order.
pub fn maximal_cubes(e: &CellSet, lg: &LatticeGrid, factor: u32) -> Vec<Cube> {
    assert_eq!(e.len(), lg.cells(), "cell set does not match the grid");
    if e.is_empty() {
        return Vec::new();
    }
    let prefix = prefix_counts(e);
    let n = lg.cells() as i64;
    let admissible = |q: Cube| {
        let (a, b) = lg.dilate_cells(q, factor);
        a >= 0 && b <= n && (prefix[b as usize] - prefix[a as usize]) as i64 == b - a
    };
    let lat = lg.lattice();
    let mut out: Vec<Cube> = (lat.s_min..=lat.s_max)
        .into_par_iter()
        .flat_map_iter(|level| {
            lg.anchors_in_grid(level)
                .map(move |a| Cube::new(level, a))
                .filter(|&q| admissible(q) && (level == lat.s_max || !admissible(q.parent())))
                .collect::<Vec<_>>()
        })
        .collect();
    sort_canonical(&mut out);
    out
}

/// Maximal cubes with `9L ⊆ E` together with single-cell cubes for every cell
/// of `E` they leave uncovered, so the result tiles `E` exactly.
pub fn whitney_cover(e: &CellSet, lg: &LatticeGrid) -> Vec<Cube> {
    let mut out = maximal_cubes(e, lg, 9);
    let mut rest = e.clone();
    for q in &out {
        rest.remove_range(lg.cube_span(*q));
    }
    out.extend(
        rest.indices()
            .into_iter()
            .map(|k| lg.cube_of_cell(k, lg.cell_level())),
    );
    sort_canonical(&mut out);
    out
}

/// Top cube plus member cubes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingCollection {
    pub top: Cube,
    pub members: Vec<Cube>,
}

/// How dilates of one-cell cubes are read when checking separation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DilateMode {
    /// One-cell cubes dilate to themselves.
    Resolved,
    /// Every dilate is the literal real interval.
    Literal,
}

/// A clause of the stopping-collection definition that fails.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "clause", rename_all = "kebab-case")]
pub enum Violation {
    Overlap {
        a: Cube,
        b: Cube,
    },
    OutsideTop {
        cube: Cube,
    },
    /// `|s_L - s_R| >= 8` but `7L` and `7R` meet.
    SeparationI {
        a: Cube,
        b: Cube,
    },
    /// `3L` meets `2Q` but `9L` is not covered by the members.
    SeparationII {
        cube: Cube,
    },
}

/// Dilate in half-cell units, so every dilate has integer endpoints.
fn half_cell_dilate(lg: &LatticeGrid, q: Cube, lambda: i64, mode: DilateMode) -> (i64, i64) {
    let (a, b) = lg.cube_cells(q);
    let w = b - a;
    if lambda <= 1 || (w == 1 && mode == DilateMode::Resolved) {
        return (2 * a, 2 * b);
    }
    let grow = (lambda - 1) * w;
    (2 * a - grow, 2 * b + grow)
}

fn meets(x: (i64, i64), y: (i64, i64)) -> bool {
    x.0 < y.1 && y.0 < x.1
}

/// Lists every violated clause; empty iff `p` is a stopping collection.
pub fn check_stopping_collection(
    p: &StoppingCollection,
    lg: &LatticeGrid,
    mode: DilateMode,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let span = |q: Cube| {
        let (a, b) = lg.cube_cells(q);
        (2 * a, 2 * b)
    };
    let mut by_start: Vec<Cube> = p.members.clone();
    by_start.sort_by_key(|&q| (lg.cube_cells(q).0, q.level));

    let mut reach: Option<(Cube, i64)> = None;
    for &q in &by_start {
        let (a, b) = span(q);
        if let Some((big, end)) = reach {
            if a < end {
                out.push(Violation::Overlap { a: big, b: q });
            }
        }
        if reach.is_none_or(|(_, end)| b > end) {
            reach = Some((q, b));
        }
    }

    let top3 = half_cell_dilate(lg, p.top, 3, mode);
    for &q in &p.members {
        let (a, b) = span(q);
        if a < top3.0 || b > top3.1 {
            out.push(Violation::OutsideTop { cube: q });
        }
    }

    let mut by_level: Vec<Cube> = p.members.clone();
    sort_canonical(&mut by_level);
    for (i, &l) in by_level.iter().enumerate() {
        let dl = half_cell_dilate(lg, l, 7, mode);
        for &r in &by_level[i + 1..] {
            if l.level - r.level >= 8 && meets(dl, half_cell_dilate(lg, r, 7, mode)) {
                out.push(Violation::SeparationI { a: l, b: r });
            }
        }
    }

    let mut runs: Vec<(i64, i64)> = by_start.iter().map(|&q| span(q)).collect();
    runs.sort_unstable();
    let mut merged: Vec<(i64, i64)> = Vec::with_capacity(runs.len());
    for r in runs {
        match merged.last_mut() {
            Some(last) if r.0 <= last.1 => last.1 = last.1.max(r.1),
            _ => merged.push(r),
        }
    }
    let covered = |x: (i64, i64)| {
        let i = merged.partition_point(|r| r.0 <= x.0);
        i > 0 && merged[i - 1].1 >= x.1
    };
    let top2 = half_cell_dilate(lg, p.top, 2, mode);
    for &l in &by_level {
        if meets(half_cell_dilate(lg, l, 3, mode), top2)
            && !covered(half_cell_dilate(lg, l, 9, mode))
        {
            out.push(Violation::SeparationII { cube: l });
        }
    }
    out
}

/// Cubes with witness cell sets `E_Q ⊆ Q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseCollection {
    pub cubes: Vec<Cube>,
    pub witnesses: BTreeMap<Cube, Vec<usize>>,
    pub eta: f64,
}

/// Result of [`check_sparsity`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub valid: bool,
    /// Smallest `|E_Q| / |Q|` over the cubes (1 for an empty collection).
    pub measured_eta: f64,
    pub problems: Vec<String>,
}

pub fn check_sparsity(s: &SparseCollection, lg: &LatticeGrid) -> SparsityReport {
    let mut problems = Vec::new();
    let mut owner: Vec<Option<Cube>> = vec![None; lg.cells()];
    let mut measured: f64 = 1.0;
    let mut seen = std::collections::BTreeSet::new();
    for &q in &s.cubes {
        if !seen.insert(q) {
            problems.push(format!("cube {q} listed twice"));
            continue;
        }
        let Some(w) = s.witnesses.get(&q) else {
            problems.push(format!("cube {q} has no witness"));
            measured = 0.0;
            continue;
        };
        let (a, b) = lg.cube_cells(q);
        let mut distinct = 0usize;
        for &k in w {
            if (k as i64) < a || (k as i64) >= b || k >= owner.len() {
                problems.push(format!("witness cell {k} of {q} lies outside the cube"));
                continue;
            }
            match owner[k] {
                Some(other) if other == q => {
                    problems.push(format!("witness cell {k} of {q} repeated"))
                }
                Some(other) => {
                    problems.push(format!("cubes {other} and {q} share witness cell {k}"))
                }
                None => {
                    owner[k] = Some(q);
                    distinct += 1;
                }
            }
        }
        let ratio = distinct as f64 / (b - a) as f64;
        measured = measured.min(ratio);
        if ratio < s.eta {
            problems.push(format!(
                "witness of {q} covers {ratio} of the cube, below {}",
                s.eta
            ));
        }
    }
    SparsityReport {
        valid: problems.is_empty(),
        measured_eta: measured,
        problems,
    }
}
