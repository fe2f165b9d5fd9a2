//! Sampled functions on uniform grids over symmetric boxes, midpoint quadrature,
//! plain and weighted L^p norms, local averages and seeded test-function
//! generation.
//!
//! A grid covers `[-R, R]^dim` with `cells` cells per axis. Cell `k` along an
//! axis spans `[-R + k h, -R + (k + 1) h)` with `h = 2R / cells`, and the value
//! stored for a cell is the function value at its center. Cells are stored in
//! row-major order (last axis fastest).

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, precondition, Error, Result};

/// Uniform cell grid over the box `[-R, R]^dim`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    half_width: f64,
    cells: usize,
}

impl Grid {
    pub fn new(dim: usize, half_width: f64, cells: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return domain(format!("grid dimension must be 1 or 2, got {dim}"));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return domain(format!("half width must be positive, got {half_width}"));
        }
        if cells == 0 {
            return domain("grid needs at least one cell per axis");
        }
        Ok(Self {
            dim,
            half_width,
            cells,
        })
    }

    /// One-dimensional grid on `[-R, R]`.
    pub fn line(half_width: f64, cells: usize) -> Result<Self> {
        Self::new(1, half_width, cells)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// Cells per axis.
    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Total number of cells.
    pub fn len(&self) -> usize {
        self.cells.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&self) -> f64 {
        2.0 * self.half_width / self.cells as f64
    }

    /// Volume of one cell, `h^dim`.
    pub fn cell_volume(&self) -> f64 {
        self.step().powi(self.dim as i32)
    }

    /// Coordinate of the center of cell `k` along any axis.
    pub fn center(&self, k: usize) -> f64 {
        -self.half_width + (k as f64 + 0.5) * self.step()
    }

    /// Cells (along one axis, unclipped) whose centers lie in `[lo, hi)`.
    pub fn center_span(&self, lo: f64, hi: f64) -> (i64, i64) {
        let h = self.step();
        let start = ((lo + self.half_width) / h - 0.5).ceil() as i64;
        let end = ((hi + self.half_width) / h - 0.5).ceil() as i64;
        (start, end.max(start))
    }

    /// Same as [`Grid::center_span`] but clipped to the grid.
    pub fn clipped_span(&self, lo: f64, hi: f64) -> Range<usize> {
        let (a, b) = self.center_span(lo, hi);
        let n = self.cells as i64;
        let a = a.clamp(0, n) as usize;
        let b = b.clamp(0, n) as usize;
        a..b.max(a)
    }

    fn contains_region(&self, region: &GridRegion) -> bool {
        let tol = 1e-9 * self.step();
        region
            .lower
            .iter()
            .zip(&region.upper)
            .all(|(&lo, &hi)| lo >= -self.half_width - tol && hi <= self.half_width + tol)
    }

    /// Per-axis cell ranges of a region that must lie inside the box.
    pub fn region_cells(&self, region: &GridRegion) -> Result<CellBox> {
        if region.dim() != self.dim {
            return domain(format!(
                "region of dimension {} on a grid of dimension {}",
                region.dim(),
                self.dim
            ));
        }
        if !self.contains_region(region) {
            return domain(format!(
                "region {region:?} extends outside the box [-{0}, {0}]",
                self.half_width
            ));
        }
        Ok(CellBox {
            cells: self.cells,
            ranges: region
                .lower
                .iter()
                .zip(&region.upper)
                .map(|(&lo, &hi)| self.clipped_span(lo, hi))
                .collect(),
        })
    }

    /// The whole box as a region.
    pub fn full_region(&self) -> GridRegion {
        GridRegion {
            lower: vec![-self.half_width; self.dim],
            upper: vec![self.half_width; self.dim],
        }
    }

    fn check_same(&self, other: &Grid) -> Result<()> {
        if self != other {
            return domain(format!("mismatched grids: {self:?} vs {other:?}"));
        }
        Ok(())
    }
}

/// Axis-aligned box with real corners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRegion {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl GridRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return domain("region corners must have equal, nonzero dimension");
        }
        for (lo, hi) in lower.iter().zip(&upper) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return domain(format!("degenerate region side [{lo}, {hi})"));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Product of side lengths.
    pub fn measure(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| hi - lo)
            .product()
    }

    /// Expands each side outward to the nearest cell boundaries of `grid`.
    pub fn snap_outward(&self, grid: &Grid) -> GridRegion {
        let h = grid.step();
        let r = grid.half_width();
        let snap = |x: f64, up: bool| {
            let t = (x + r) / h;
            let k = if up { t.ceil() } else { t.floor() };
            -r + k * h
        };
        GridRegion {
            lower: self.lower.iter().map(|&x| snap(x, false)).collect(),
            upper: self.upper.iter().map(|&x| snap(x, true)).collect(),
        }
    }

    /// Intersection with the grid box, or `None` when they are disjoint.
    pub fn clip_to(&self, grid: &Grid) -> Option<GridRegion> {
        let r = grid.half_width();
        let lower: Vec<f64> = self.lower.iter().map(|&x| x.max(-r)).collect();
        let upper: Vec<f64> = self.upper.iter().map(|&x| x.min(r)).collect();
        GridRegion::new(lower, upper).ok()
    }
}

/// Rectangular block of grid cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellBox {
    cells: usize,
    ranges: Vec<Range<usize>>,
}

impl CellBox {
    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn count(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).product()
    }

    /// Flat (row-major) indices of the cells in the block.
    pub fn indices(&self) -> Vec<usize> {
        match self.ranges.as_slice() {
            [r] => r.clone().collect(),
            [r0, r1] => r0
                .clone()
                .flat_map(|i| r1.clone().map(move |j| i * self.cells + j))
                .collect(),
            _ => unreachable!("grids are one- or two-dimensional"),
        }
    }
}

/// Real function sampled at the cell centers of a [`Grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct SampledFunction {
    grid: Grid,
    values: Vec<f64>,
}

impl SampledFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return domain(format!(
                "expected {} samples, got {}",
                grid.len(),
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return domain(format!("non-finite sample at cell {i}"));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    /// Samples `f` at every cell center; `f` receives the center coordinates.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let n = grid.cells();
        let values = match grid.dim() {
            1 => (0..n).map(|i| f(&[grid.center(i)])).collect(),
            _ => (0..n * n)
                .map(|k| f(&[grid.center(k / n), grid.center(k % n)]))
                .collect(),
        };
        Self::new(grid, values)
    }

    pub fn from_fn_1d(grid: Grid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_fn(grid, |x| f(x[0]))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn abs(&self) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| v.abs()).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    /// Cellwise combination `a*self + b*other`.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        Ok(Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }

    pub fn product(&self, other: &Self) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        Ok(Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| x * y)
                .collect(),
        })
    }

    /// Zeroes every cell outside the given flat index range (1-D grids).
    pub fn restricted(&self, span: Range<usize>) -> Self {
        let mut values = vec![0.0; self.values.len()];
        let end = span.end.min(values.len());
        let start = span.start.min(end);
        values[start..end].copy_from_slice(&self.values[start..end]);
        Self {
            grid: self.grid,
            values,
        }
    }

    /// Smallest flat index range holding every nonzero sample, if any.
    pub fn support_span(&self) -> Option<Range<usize>> {
        let first = self.values.iter().position(|&v| v != 0.0)?;
        let last = self.values.iter().rposition(|&v| v != 0.0)?;
        Some(first..last + 1)
    }

    /// JSON header describing the grid.
    pub fn header(&self) -> SampleHeader {
        SampleHeader {
            dimension: self.grid.dim(),
            r: self.grid.half_width(),
            h: self.grid.step(),
            cells_per_axis: self.grid.cells(),
        }
    }

    /// Writes `<stem>.json` (grid header) and `<stem>.csv` (`index,value` rows).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let header = serde_json::to_string_pretty(&self.header())
            .map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(format!("{stem}.json")), header)?;
        let mut out = std::io::BufWriter::new(fs::File::create(dir.join(format!("{stem}.csv")))?);
        self.write_csv(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let text = fs::read_to_string(dir.join(format!("{stem}.json")))?;
        let header: SampleHeader =
            serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let file = fs::File::open(dir.join(format!("{stem}.csv")))?;
        Self::read_csv(&header, BufReader::new(file))
    }

    /// Body rows `index,value`, values in shortest round-trip notation.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "index,value")?;
        for (i, v) in self.values.iter().enumerate() {
            writeln!(out, "{i},{v:?}")?;
        }
        Ok(())
    }

    pub fn read_csv(header: &SampleHeader, input: impl BufRead) -> Result<Self> {
        let grid = header.grid()?;
        let mut values = vec![0.0; grid.len()];
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let (idx, val) = line.split_once(',').ok_or_else(|| {
                Error::Format(format!("line {}: expected index,value", lineno + 1))
            })?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            let val: f64 = val
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            *values
                .get_mut(idx)
                .ok_or_else(|| Error::Format(format!("cell index {idx} out of range")))? = val;
        }
        Self::new(grid, values)
    }
}

/// Grid metadata stored next to serialized samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleHeader {
    pub dimension: usize,
    #[serde(rename = "R")]
    pub r: f64,
    pub h: f64,
    pub cells_per_axis: usize,
}

impl SampleHeader {
    pub fn grid(&self) -> Result<Grid> {
        let grid = Grid::new(self.dimension, self.r, self.cells_per_axis)?;
        if (grid.step() - self.h).abs() > 1e-12 * self.h.abs() {
            return Err(Error::Format(format!(
                "header step {} disagrees with 2R/cells = {}",
                self.h,
                grid.step()
            )));
        }
        Ok(grid)
    }
}

pub(crate) fn check_exponent(p: f64) -> Result<()> {
    if p.is_nan() || p < 1.0 {
        return domain(format!("exponent must lie in [1, inf], got {p}"));
    }
    Ok(())
}

/// Midpoint-rule integral of `f` over `region`: `h^dim` times the sum of the
/// samples whose cell centers lie in the region.
pub fn integrate(f: &SampledFunction, region: &GridRegion) -> Result<f64> {
    let cells = f.grid().region_cells(region)?;
    let sum: f64 = cells.indices().into_iter().map(|i| f.values[i]).sum();
    Ok(sum * f.grid().cell_volume())
}

/// `(integral of |f|^p w)^(1/p)`; `p = inf` gives the largest `|f|` over cells.
pub fn lp_norm(f: &SampledFunction, p: f64, weight: Option<&SampledFunction>) -> Result<f64> {
    check_exponent(p)?;
    if let Some(w) = weight {
        f.grid().check_same(w.grid())?;
        if let Some(i) = f
            .values
            .iter()
            .zip(&w.values)
            .position(|(&v, &wv)| v != 0.0 && wv <= 0.0)
        {
            return precondition(format!("weight not positive at support cell {i}"));
        }
    }
    if p.is_infinite() {
        return Ok(f.sup_norm());
    }
    let sum = weighted_power_sum(f.values(), p, weight.map(|w| w.values()));
    Ok((sum * f.grid().cell_volume()).powf(1.0 / p))
}

/// `sum |v|^p w` with the weight factor applied cellwise.
pub(crate) fn weighted_power_sum(values: &[f64], p: f64, weight: Option<&[f64]>) -> f64 {
    match weight {
        Some(w) => values.iter().zip(w).map(|(v, w)| pow_abs(*v, p) * w).sum(),
        None => values.iter().map(|v| pow_abs(*v, p) * 1.0).sum(),
    }
}

#[inline]
pub(crate) fn pow_abs(v: f64, p: f64) -> f64 {
    if p == 1.0 {
        v.abs()
    } else if p == 2.0 {
        v * v
    } else {
        v.abs().powf(p)
    }
}

/// Normalized local average `(f)_{q,R} = |R|^{-1/q} ||f 1_R||_q`.
pub fn lp_average(f: &SampledFunction, q: f64, region: &GridRegion) -> Result<f64> {
    check_exponent(q)?;
    let cells = f.grid().region_cells(region)?;
    if cells.count() == 0 {
        return domain("average over a region containing no cell centers");
    }
    let idx = cells.indices();
    if q.is_infinite() {
        return Ok(idx.iter().fold(0.0, |m, &i| m.max(f.values[i].abs())));
    }
    let sum: f64 = idx.iter().map(|&i| pow_abs(f.values[i], q)).sum();
    Ok((sum / idx.len() as f64).powf(1.0 / q))
}

/// `(f)_{q}` over a contiguous run of 1-D samples.
pub(crate) fn average_of_slice(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    if q.is_infinite() {
        return values.iter().fold(0.0, |m, v| m.max(v.abs()));
    }
    let sum: f64 = values.iter().map(|&v| pow_abs(v, q)).sum();
    (sum / values.len() as f64).powf(1.0 / q)
}

/// Independent per-trial seed derived from a master seed (splitmix64 mix).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        ^ index
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shape family for [`random_test_function`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothness {
    /// Signed sum of smooth compactly supported bumps.
    BumpSum,
    /// Signed sum of indicators of random sub-boxes.
    RoughIndicator,
}

/// Seeded random function supported in `support` with `||f||_inf <= amplitude`.
///
/// Samples are rounded to multiples of `2^(e - 32)` where `2^e <= amplitude`,
/// so sums and differences of them stay exact in double precision.
pub fn random_test_function(
    grid: Grid,
    seed: u64,
    smoothness: Smoothness,
    support: &GridRegion,
    amplitude: f64,
) -> Result<SampledFunction> {
    let cells = grid.region_cells(support)?;
    if !(amplitude.is_finite() && amplitude >= 0.0) {
        return domain(format!(
            "amplitude must be finite and nonnegative, got {amplitude}"
        ));
    }
    let mut out = SampledFunction::zeros(grid);
    if amplitude == 0.0 || cells.count() == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = grid.dim();
    let (lo, hi) = (support.lower(), support.upper());
    let terms = rng.gen_range(1..=6);
    let mut shapes = Vec::with_capacity(terms);
    for _ in 0..terms {
        let mut center = [0.0; 2];
        let mut radius = [0.0; 2];
        for a in 0..dim {
            let width = hi[a] - lo[a];
            center[a] = rng.gen_range(lo[a]..hi[a]);
            radius[a] = width * rng.gen_range(0.05..0.5);
        }
        let height: f64 = rng.gen_range(-1.0..1.0);
        shapes.push((center, radius, height));
    }
    let n = grid.cells();
    for i in cells.indices() {
        let x = match dim {
            1 => [grid.center(i), 0.0],
            _ => [grid.center(i / n), grid.center(i % n)],
        };
        let mut v = 0.0;
        for (c, r, height) in &shapes {
            let mut factor = 1.0;
            for a in 0..dim {
                let t = (x[a] - c[a]) / r[a];
                factor *= match smoothness {
                    Smoothness::BumpSum => bump(t),
                    Smoothness::RoughIndicator => f64::from(u8::from(t.abs() < 1.0)),
                };
            }
            v += height * factor;
        }
        out.values[i] = v;
    }
    let peak = out.sup_norm();
    let quantum = 2f64.powi(amplitude.log2().floor() as i32 - 32);
    let cap = (amplitude / quantum).floor() * quantum;
    if peak > 0.0 {
        let target = amplitude * rng.gen_range(0.5..=1.0);
        for v in &mut out.values {
            let scaled = *v / peak * target;
            *v = ((scaled / quantum).round() * quantum).clamp(-cap, cap);
        }
    }
    Ok(out)
}

fn bump(t: f64) -> f64 {
    if t.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - t * t)).exp()
    }
}
