//! Angular profiles `Ω` on the circle, the homogeneous kernel
//! `K(y) = Ω(y/|y|) / |y|^2` on the plane, its smooth dyadic scale pieces
//! `K_s`, and the truncated bilinear operator and trilinear forms built on them.
//!
//! The scale partition is `φ(r) = χ(r) - χ(2r)` where `χ` is a smooth step
//! equal to 1 on `[0, 1/2]` and 0 on `[1, ∞)`, so `φ` lives on `(1/4, 1)`,
//! equals 1 at `r = 1/2`, and `Σ_s φ(2^{-s} r)` telescopes to 1.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dyadic::{LatticeGrid, StoppingCollection};
use crate::error::{domain, precondition, Result};
use crate::grid::{
    check_exponent, derive_seed, lp_norm, random_test_function, Grid, GridRegion, SampledFunction,
    Smoothness,
};

const MEAN_NODES: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
enum OmegaKind {
    Zero,
    Commutator,
    SmoothSin(u32),
    /// Values at `θ_i = 2π i / n`, linearly interpolated.
    Sampled(Vec<f64>),
}

/// A bounded angular profile `Ω` on the unit circle.
#[derive(Clone, Debug, PartialEq)]
pub struct OmegaSpec {
    kind: OmegaKind,
    name: String,
    sup_norm: f64,
    mean: f64,
}

fn step(t: f64) -> f64 {
    f64::from(u8::from(t > 0.0))
}

impl OmegaSpec {
    fn build(kind: OmegaKind, name: String, sup_norm: f64) -> Result<Self> {
        let mut spec = Self {
            kind,
            name,
            sup_norm,
            mean: 0.0,
        };
        spec.mean = spec.integral();
        if !(spec.sup_norm.is_finite())
            || spec.mean.abs() > 1e-6 * spec.sup_norm.max(f64::MIN_POSITIVE)
        {
            return domain(format!(
                "profile {} is not mean-zero: integral {}",
                spec.name, spec.mean
            ));
        }
        Ok(spec)
    }

    pub fn zero() -> Self {
        Self::build(OmegaKind::Zero, "zero".into(), 0.0).expect("zero is mean-zero")
    }

    /// `Ω(u, v) = (e(v) - e(v - u)) / u^2` with `e = 1_{(0, ∞)}`; zero where
    /// the numerator vanishes.
    pub fn commutator() -> Self {
        Self::build(OmegaKind::Commutator, "commutator".into(), 2.0)
            .expect("odd profiles are mean-zero")
    }

    /// `Ω(θ) = sin(kθ)`.
    pub fn smooth_sin(k: u32) -> Result<Self> {
        if k == 0 {
            return domain("sin(0θ) is identically zero; use the zero profile");
        }
        Self::build(OmegaKind::SmoothSin(k), format!("smooth-sin-{k}"), 1.0)
    }

    /// Seeded uniform samples in `[-1, 1]` at `n` equispaced angles, shifted
    /// to mean zero.
    pub fn random_bounded(seed: u64, n: usize) -> Result<Self> {
        if n < 2 {
            return domain("need at least two angular samples");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let m = v.iter().sum::<f64>() / n as f64;
        v.iter_mut().for_each(|x| *x -= m);
        Self::from_samples(v, format!("random-bounded:{seed}"))
    }

    /// Profile given by samples at `θ_i = 2π i / n`, linearly interpolated.
    pub fn from_samples(samples: Vec<f64>, name: String) -> Result<Self> {
        if samples.len() < 2 || samples.iter().any(|v| !v.is_finite()) {
            return domain("angular samples must be finite and at least two");
        }
        let sup = samples.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
        Self::build(OmegaKind::Sampled(samples), name, sup)
    }

    /// Preset by name: `zero`, `commutator`, `smooth-sin-<k>`,
    /// `random-bounded` or `random-bounded:<seed>`.
    pub fn from_name(name: &str, default_seed: u64) -> Result<Self> {
        match name {
            "zero" => Ok(Self::zero()),
            "commutator" => Ok(Self::commutator()),
            "random-bounded" => Self::random_bounded(default_seed, 64),
            _ => {
                if let Some(k) = name.strip_prefix("smooth-sin-") {
                    let k = k
                        .parse()
                        .map_err(|_| crate::Error::Domain(format!("bad frequency in {name}")))?;
                    Self::smooth_sin(k)
                } else if let Some(seed) = name.strip_prefix("random-bounded:") {
                    let seed = seed
                        .parse()
                        .map_err(|_| crate::Error::Domain(format!("bad seed in {name}")))?;
                    Self::random_bounded(seed, 64)
                } else {
                    domain(format!("unknown omega preset {name:?}"))
                }
            }
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    /// `∫_{S^1} Ω dσ` by midpoint quadrature.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn is_zero(&self) -> bool {
        self.kind == OmegaKind::Zero
    }

    /// `Ω` at the unit vector `(u, v)`.
    pub fn eval_unit(&self, u: f64, v: f64) -> f64 {
        match &self.kind {
            OmegaKind::Zero => 0.0,
            OmegaKind::Commutator => {
                let num = step(v) - step(v - u);
                if num == 0.0 {
                    0.0
                } else {
                    num / (u * u)
                }
            }
            OmegaKind::SmoothSin(k) => (f64::from(*k) * v.atan2(u)).sin(),
            OmegaKind::Sampled(s) => {
                let theta = v.atan2(u).rem_euclid(TAU);
                let t = theta / TAU * s.len() as f64;
                let i = (t.floor() as usize).min(s.len() - 1);
                let frac = t - i as f64;
                s[i] * (1.0 - frac) + s[(i + 1) % s.len()] * frac
            }
        }
    }

    pub fn eval_angle(&self, theta: f64) -> f64 {
        let (v, u) = theta.sin_cos();
        self.eval_unit(u, v)
    }

    fn integral(&self) -> f64 {
        let d = TAU / MEAN_NODES as f64;
        (0..MEAN_NODES)
            .map(|i| self.eval_angle((i as f64 + 0.5) * d))
            .sum::<f64>()
            * d
    }
}

/// Smooth radial scale partition `φ_s(y) = φ(2^{-s}|y|)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScalePartition;

fn smooth_transition(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / t).exp();
    let b = (-1.0 / (1.0 - t)).exp();
    a / (a + b)
}

impl ScalePartition {
    /// Smooth step: 1 on `[0, 1/2]`, 0 on `[1, ∞)`.
    pub fn chi(&self, r: f64) -> f64 {
        smooth_transition(2.0 * (1.0 - r))
    }

    pub fn phi(&self, r: f64) -> f64 {
        self.chi(r) - self.chi(2.0 * r)
    }

    pub fn phi_s(&self, s: i32, r: f64) -> f64 {
        self.phi(r * 2f64.powi(-s))
    }

    /// `Σ_{s ∈ window} φ_s(r)`, telescoped.
    pub fn window_weight(&self, window: &TruncationWindow, r: f64) -> f64 {
        if window.is_empty() {
            return 0.0;
        }
        self.chi(r * 2f64.powi(-(window.nu - 1))) - self.chi(r * 2f64.powi(-window.mu))
    }
}

/// Scales `s` with `mu < s < nu`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationWindow {
    pub mu: i32,
    pub nu: i32,
}

impl TruncationWindow {
    pub fn new(mu: i32, nu: i32) -> Self {
        Self { mu, nu }
    }

    pub fn is_empty(&self) -> bool {
        self.nu <= self.mu + 1
    }

    pub fn scales(&self) -> Range<i32> {
        self.mu + 1..self.nu.max(self.mu + 1)
    }

    /// Largest scale in the window.
    pub fn top(&self) -> i32 {
        self.nu - 1
    }

    /// Same window with every scale above `s` dropped.
    pub fn capped(&self, s: i32) -> Self {
        Self {
            mu: self.mu,
            nu: self.nu.min(s + 1),
        }
    }

    /// The single scale `s`.
    pub fn single(s: i32) -> Self {
        Self {
            mu: s - 1,
            nu: s + 1,
        }
    }
}

/// `Ω(y/|y|) / |y|^2` for `y ∈ R^2 \ {0}`.
pub fn kernel_eval(omega: &OmegaSpec, y: [f64; 2]) -> Result<f64> {
    let r = y[0].hypot(y[1]);
    if r == 0.0 {
        return domain("the kernel is singular at the origin");
    }
    Ok(omega.eval_unit(y[0] / r, y[1] / r) / (r * r))
}

/// `K_s(y) = K(y) φ_s(y)`.
pub fn single_scale_kernel(
    omega: &OmegaSpec,
    partition: &ScalePartition,
    s: i32,
    y: [f64; 2],
) -> Result<f64> {
    let k = kernel_eval(omega, y)?;
    let w = partition.phi_s(s, y[0].hypot(y[1]));
    Ok(if w == 0.0 { 0.0 } else { k * w })
}

/// Radial and angular node counts for [`single_scale_functional`].
pub const FUNCTIONAL_NODES: (usize, usize) = (400, 2048);

/// `2^{2s/p'} ‖K_s‖_{L^p(R^2)}` by polar midpoint quadrature over the annulus
/// `2^{s-2} ≤ |y| ≤ 2^s`.
pub fn single_scale_functional(
    omega: &OmegaSpec,
    partition: &ScalePartition,
    p: f64,
    s: i32,
) -> Result<f64> {
    check_exponent(p)?;
    let (nr, nt) = FUNCTIONAL_NODES;
    let side = 2f64.powi(s);
    let (r0, r1) = (0.25 * side, side);
    let dr = (r1 - r0) / nr as f64;
    let dt = TAU / nt as f64;
    let angular: Vec<f64> = (0..nt)
        .map(|j| omega.eval_angle((j as f64 + 0.5) * dt).abs())
        .collect();
    if p.is_infinite() {
        let amax = angular.iter().fold(0.0, |m: f64, v| m.max(*v));
        let rmax = (0..nr)
            .map(|i| {
                let r = r0 + (i as f64 + 0.5) * dr;
                partition.phi_s(s, r) / (r * r)
            })
            .fold(0.0, f64::max);
        return Ok(side * side * amax * rmax);
    }
    let ang: f64 = angular.iter().map(|a| a.powf(p)).sum::<f64>() * dt;
    let rad: f64 = (0..nr)
        .map(|i| {
            let r = r0 + (i as f64 + 0.5) * dr;
            (partition.phi_s(s, r) / (r * r)).powf(p) * r
        })
        .sum::<f64>()
        * dr;
    let pprime_inv = 1.0 - 1.0 / p;
    Ok(2f64.powf(2.0 * f64::from(s) * pprime_inv) * (ang * rad).powf(1.0 / p))
}

/// Grid samples of `Σ_{s ∈ window} K_s(k1 h, k2 h) h^2` for `|k1|, |k2| ≤ radius`.
#[derive(Clone, Debug)]
pub struct KernelTable {
    radius: usize,
    width: usize,
    data: Vec<f64>,
    step: f64,
}

impl KernelTable {
    pub fn new(
        omega: &OmegaSpec,
        partition: &ScalePartition,
        grid: &Grid,
        window: &TruncationWindow,
    ) -> Self {
        let h = grid.step();
        let radius = if window.is_empty() || omega.is_zero() {
            0
        } else {
            ((2f64.powi(window.top()) / h).ceil() as usize).min(grid.cells().saturating_sub(1))
        };
        let width = 2 * radius + 1;
        let r = radius as isize;
        let data = (0..width * width)
            .map(|idx| {
                let k1 = (idx / width) as isize - r;
                let k2 = (idx % width) as isize - r;
                if (k1, k2) == (0, 0) || window.is_empty() {
                    return 0.0;
                }
                let y = [k1 as f64 * h, k2 as f64 * h];
                let w = partition.window_weight(window, y[0].hypot(y[1]));
                if w == 0.0 {
                    0.0
                } else {
                    kernel_eval(omega, y).expect("nonzero offset") * w * h * h
                }
            })
            .collect();
        Self {
            radius,
            width,
            data,
            step: h,
        }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    fn row(&self, k1: isize) -> &[f64] {
        let i = (k1 + self.radius as isize) as usize;
        &self.data[i * self.width..(i + 1) * self.width]
    }

    /// `T(f1, f2)(x)` at cell `x`, with `f1` read only on `f1_span`.
    fn apply_at(&self, f1: &[f64], f2: &[f64], f1_span: &Range<usize>, x: usize) -> f64 {
        let n = f2.len();
        let r = self.radius;
        let lo = f1_span.start.max(x.saturating_sub(r));
        let hi = f1_span.end.min(x + r + 1);
        let y2_lo = x.saturating_sub(r);
        let y2_hi = (x + r + 1).min(n);
        let mut acc = 0.0;
        for y1 in lo..hi {
            let a = f1[y1];
            if a == 0.0 {
                continue;
            }
            let row = self.row(x as isize - y1 as isize);
            // row index of offset k2 = x - y2 is (r + x - y2)
            let base = r + x;
            let mut inner = 0.0;
            for y2 in y2_lo..y2_hi {
                inner += f2[y2] * row[base - y2];
            }
            acc += a * inner;
        }
        acc
    }

    /// `∫ T(f1 1_span, f2) f3`.
    fn form(&self, f1: &[f64], f2: &[f64], f3: &[f64], f1_span: Range<usize>) -> f64 {
        if f1_span.is_empty() {
            return 0.0;
        }
        let n = f3.len();
        let xs: Vec<usize> = (f1_span.start.saturating_sub(self.radius)
            ..(f1_span.end + self.radius).min(n))
            .filter(|&x| f3[x] != 0.0)
            .collect();
        let terms: Vec<f64> = xs
            .par_iter()
            .map(|&x| self.apply_at(f1, f2, &f1_span, x) * f3[x])
            .collect();
        terms.iter().sum::<f64>() * self.step
    }
}

fn same_grid(fs: &[&SampledFunction]) -> Result<Grid> {
    let g = *fs[0].grid();
    if g.dim() != 1 {
        return domain("ambient functions live on one-dimensional grids");
    }
    if fs.iter().any(|f| *f.grid() != g) {
        return domain("inputs live on different grids");
    }
    Ok(g)
}

/// `T(f1, f2)(x) = Σ_{s ∈ window} ∬ f1(x - y1) f2(x - y2) K_s(y1, y2) dy` by
/// grid quadrature.
pub fn apply_truncated(
    omega: &OmegaSpec,
    partition: &ScalePartition,
    f1: &SampledFunction,
    f2: &SampledFunction,
    window: &TruncationWindow,
) -> Result<SampledFunction> {
    let grid = same_grid(&[f1, f2])?;
    let table = KernelTable::new(omega, partition, &grid, window);
    Ok(apply_with_table(&table, f1, f2))
}

pub fn apply_with_table(
    table: &KernelTable,
    f1: &SampledFunction,
    f2: &SampledFunction,
) -> SampledFunction {
    let n = f1.values().len();
    let span = 0..n;
    let out: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|x| table.apply_at(f1.values(), f2.values(), &span, x))
        .collect();
    SampledFunction::new(*f1.grid(), out).expect("finite kernel sums")
}

/// `Λ(f1, f2, f3) = ∫ T(f1, f2) f3` over the window.
pub fn trilinear_form(
    omega: &OmegaSpec,
    partition: &ScalePartition,
    f1: &SampledFunction,
    f2: &SampledFunction,
    f3: &SampledFunction,
    window: &TruncationWindow,
) -> Result<f64> {
    let grid = same_grid(&[f1, f2, f3])?;
    let table = KernelTable::new(omega, partition, &grid, window);
    Ok(table.form(f1.values(), f2.values(), f3.values(), 0..grid.cells()))
}

/// Kernel tables keyed by the upper window end, for forms that cap the window
/// at many cube scales.
pub struct FormEvaluator<'a> {
    omega: &'a OmegaSpec,
    partition: ScalePartition,
    grid: Grid,
    window: TruncationWindow,
    tables: BTreeMap<i32, KernelTable>,
}

impl<'a> FormEvaluator<'a> {
    pub fn new(
        omega: &'a OmegaSpec,
        partition: &ScalePartition,
        grid: Grid,
        window: TruncationWindow,
    ) -> Self {
        Self {
            omega,
            partition: *partition,
            grid,
            window,
            tables: BTreeMap::new(),
        }
    }

    fn table(&mut self, w: TruncationWindow) -> &KernelTable {
        let (omega, partition, grid) = (self.omega, self.partition, self.grid);
        self.tables
            .entry(w.nu)
            .or_insert_with(|| KernelTable::new(omega, &partition, &grid, &w))
    }

    /// `Λ^{min(s_L, top)}(f1 1_L, f2, f3)`.
    pub fn lambda_localized(
        &mut self,
        lg: &LatticeGrid,
        cube: crate::dyadic::Cube,
        f1: &SampledFunction,
        f2: &SampledFunction,
        f3: &SampledFunction,
    ) -> Result<f64> {
        same_grid(&[f1, f2, f3])?;
        let w = self.window.capped(cube.level);
        let span = lg.cube_span(cube);
        let table = self.table(w);
        Ok(table.form(f1.values(), f2.values(), f3.values(), span))
    }

    /// `Λ_Q - Σ_{L ∈ P, L ⊆ Q} Λ_L` for the top `Q` of `P`.
    pub fn lambda_p(
        &mut self,
        lg: &LatticeGrid,
        p_coll: &StoppingCollection,
        f1: &SampledFunction,
        f2: &SampledFunction,
        f3: &SampledFunction,
    ) -> Result<f64> {
        same_grid(&[f1, f2, f3])?;
        let q = p_coll.top;
        check_support(f1, lg.cube_cells(q), "f1", "Q")?;
        check_support(f2, lg.dilate_cells(q, 3), "f2", "3Q")?;
        check_support(f3, lg.dilate_cells(q, 3), "f3", "3Q")?;
        let mut total = self.lambda_localized(lg, q, f1, f2, f3)?;
        for &l in &p_coll.members {
            if q.contains(&l) {
                total -= self.lambda_localized(lg, l, f1, f2, f3)?;
            }
        }
        Ok(total)
    }

    /// `Λ` restricted to the scales in `scales`, with `f1` cut to `f1_span`.
    pub fn scale_range_form(
        &mut self,
        scales: TruncationWindow,
        f1: &SampledFunction,
        f2: &SampledFunction,
        f3: &SampledFunction,
        f1_span: Range<usize>,
    ) -> f64 {
        let (omega, partition, grid) = (self.omega, self.partition, self.grid);
        KernelTable::new(omega, &partition, &grid, &scales).form(
            f1.values(),
            f2.values(),
            f3.values(),
            f1_span,
        )
    }
}

pub(crate) fn check_support(
    f: &SampledFunction,
    (a, b): (i64, i64),
    name: &str,
    region: &str,
) -> Result<()> {
    if let Some(s) = f.support_span() {
        if (s.start as i64) < a || (s.end as i64) > b {
            return precondition(format!("{name} is not supported in {region}"));
        }
    }
    Ok(())
}

/// `Λ_L` for one cube; see [`FormEvaluator::lambda_localized`].
#[allow(clippy::too_many_arguments)]
pub fn lambda_localized(
    omega: &OmegaSpec,
    partition: &ScalePartition,
    lg: &LatticeGrid,
    cube: crate::dyadic::Cube,
    f1: &SampledFunction,
    f2: &SampledFunction,
    f3: &SampledFunction,
    window: &TruncationWindow,
) -> Result<f64> {
    FormEvaluator::new(omega, partition, *lg.grid(), *window).lambda_localized(lg, cube, f1, f2, f3)
}

/// `Λ_P`; see [`FormEvaluator::lambda_p`].
#[allow(clippy::too_many_arguments)]
pub fn lambda_p(
    omega: &OmegaSpec,
    partition: &ScalePartition,
    lg: &LatticeGrid,
    p_coll: &StoppingCollection,
    f1: &SampledFunction,
    f2: &SampledFunction,
    f3: &SampledFunction,
    window: &TruncationWindow,
) -> Result<f64> {
    FormEvaluator::new(omega, partition, *lg.grid(), *window).lambda_p(lg, p_coll, f1, f2, f3)
}

/// Hölder exponents `(r1, r2, α)` with `1/r1 + 1/r2 = 1/α`.
pub fn check_holder(r1: f64, r2: f64, alpha: f64) -> Result<()> {
    for (name, v) in [("r1", r1), ("r2", r2), ("alpha", alpha)] {
        if v.is_nan() || v < 1.0 {
            return domain(format!("{name} = {v} must lie in [1, inf]"));
        }
    }
    let gap = 1.0 / r1 + 1.0 / r2 - 1.0 / alpha;
    if gap.abs() > 1e-12 {
        return domain(format!(
            "1/r1 + 1/r2 = 1/alpha fails: 1/{r1} + 1/{r2} != 1/{alpha}"
        ));
    }
    Ok(())
}

fn conjugate(p: f64) -> f64 {
    if p == 1.0 {
        f64::INFINITY
    } else if p.is_infinite() {
        1.0
    } else {
        p / (p - 1.0)
    }
}

/// Running maximum of `|Λ| / (‖f1‖_{r1} ‖f2‖_{r2} ‖f3‖_{α'})` over seeded
/// random inputs and random sub-windows of `window`: an empirical lower bound
/// for the truncation-uniform constant. Entry `t` is the maximum after `t + 1`
/// trials.
#[allow(clippy::too_many_arguments)]
pub fn estimate_ct(
    omega: &OmegaSpec,
    partition: &ScalePartition,
    grid: Grid,
    exponents: (f64, f64, f64),
    window: &TruncationWindow,
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (r1, r2, alpha) = exponents;
    check_holder(r1, r2, alpha)?;
    let support = GridRegion::interval(-0.5 * grid.half_width(), 0.5 * grid.half_width())?;
    let ratios: Vec<f64> = (0..trials)
        .map(|t| {
            let ts = derive_seed(seed, t as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(ts);
            let sub = if window.is_empty() {
                *window
            } else {
                let mu = rng.gen_range(window.mu..window.nu - 1);
                TruncationWindow::new(mu, rng.gen_range(mu + 2..=window.nu))
            };
            let kind = |i: u64| {
                if (ts >> i) & 1 == 0 {
                    Smoothness::BumpSum
                } else {
                    Smoothness::RoughIndicator
                }
            };
            let f1 = random_test_function(grid, derive_seed(ts, 1), kind(1), &support, 1.0)?;
            let f2 = random_test_function(grid, derive_seed(ts, 2), kind(2), &support, 1.0)?;
            let f3 = random_test_function(grid, derive_seed(ts, 3), kind(3), &support, 1.0)?;
            let lam = trilinear_form(omega, partition, &f1, &f2, &f3, &sub)?;
            let den = lp_norm(&f1, r1, None)?
                * lp_norm(&f2, r2, None)?
                * lp_norm(&f3, conjugate(alpha), None)?;
            Ok(if den > 0.0 { lam.abs() / den } else { 0.0 })
        })
        .collect::<Result<_>>()?;
    let mut run = 0.0f64;
    Ok(ratios
        .into_iter()
        .map(|r| {
            run = run.max(r);
            run
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::{Cube, DyadicLattice};
    use rand::Rng;

    fn part() -> ScalePartition {
        ScalePartition
    }

    #[test]
    fn commutator_examples() {
        let om = OmegaSpec::commutator();
        assert_eq!(om.eval_unit(0.6, 0.8), 0.0);
        assert!((om.eval_unit(0.8, 0.6) - 1.5625).abs() < 1e-15);
        assert!((om.eval_unit(-0.8, -0.6) + 1.5625).abs() < 1e-15);
        assert_eq!(om.eval_unit(0.0, 1.0), 0.0);
        assert_eq!(om.sup_norm(), 2.0);
        assert!(om.mean().abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let t: f64 = rng.gen_range(0.0..TAU);
            let (v, u) = t.sin_cos();
            let a = om.eval_unit(u, v);
            assert!(a.abs() <= 2.0 + 1e-12);
            if v != u {
                assert_eq!(a, -om.eval_unit(-u, -v));
            }
        }
    }

    #[test]
    fn presets_by_name() {
        assert_eq!(
            OmegaSpec::from_name("commutator", 0).unwrap().name(),
            "commutator"
        );
        let s = OmegaSpec::from_name("smooth-sin-3", 0).unwrap();
        assert!((s.eval_angle(0.5) - (1.5f64).sin()).abs() < 1e-12);
        let r = OmegaSpec::from_name("random-bounded:9", 0).unwrap();
        assert!(r.mean().abs() <= 1e-6 * r.sup_norm());
        assert!(OmegaSpec::from_name("nope", 0).is_err());
        assert!(OmegaSpec::from_samples(vec![1.0, 1.0, 1.0], "ones".into()).is_err());
    }

    #[test]
    fn kernel_examples() {
        let om = OmegaSpec::commutator();
        assert!((kernel_eval(&om, [0.8, 0.6]).unwrap() - 1.5625).abs() < 1e-15);
        assert!(kernel_eval(&om, [0.0, 0.0]).is_err());
        let s = OmegaSpec::smooth_sin(2).unwrap();
        for y in [[0.3, -0.7], [1.1, 0.4], [-2.0, 0.5]] {
            let k = kernel_eval(&s, y).unwrap();
            let k2 = kernel_eval(&s, [2.0 * y[0], 2.0 * y[1]]).unwrap();
            assert!((k2 - k / 4.0).abs() <= 1e-14 * k.abs().max(1.0));
            assert_eq!(
                kernel_eval(&om, [-y[0], -y[1]]).unwrap(),
                -kernel_eval(&om, y).unwrap()
            );
        }
        let r = 1.0f64;
        let t = 0.9f64;
        assert!(
            (kernel_eval(&s, [r * t.cos(), r * t.sin()]).unwrap() - s.eval_angle(t)).abs() < 1e-12
        );
    }

    #[test]
    fn partition_of_unity_and_support() {
        let p = part();
        let w = TruncationWindow::new(-12, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let r = 2f64.powf(rng.gen_range(-8.0..8.0));
            let direct: f64 = w.scales().map(|s| p.phi_s(s, r)).sum();
            assert!((direct - 1.0).abs() <= 1e-10, "r={r}");
            assert!((p.window_weight(&w, r) - 1.0).abs() <= 1e-10);
            for s in -3..3 {
                let v = p.phi_s(s, r);
                assert!(v >= 0.0);
                if r > 2f64.powi(s) || r < 2f64.powi(s - 2) {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert_eq!(p.phi(0.5), 1.0);
    }

    #[test]
    fn single_scale_kernel_examples() {
        let om = OmegaSpec::commutator();
        let p = part();
        assert_eq!(single_scale_kernel(&om, &p, 0, [0.9, 0.6]).unwrap(), 0.0);
        // |y| = 2^{s-1}: the partition equals 1 there
        let y = [0.8 * 2.0, 0.6 * 2.0];
        assert_eq!(
            single_scale_kernel(&om, &p, 2, y).unwrap(),
            kernel_eval(&om, y).unwrap()
        );
        let y = [0.37, 0.21];
        let sum: f64 = (-6..6)
            .map(|s| single_scale_kernel(&om, &p, s, y).unwrap())
            .sum();
        assert!((sum - kernel_eval(&om, y).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn single_scale_functional_examples() {
        let p = part();
        assert_eq!(
            single_scale_functional(&OmegaSpec::zero(), &p, 2.0, 0).unwrap(),
            0.0
        );
        let om = OmegaSpec::commutator();
        for q in [1.5, 2.0, 4.0] {
            let a = single_scale_functional(&om, &p, q, 0).unwrap();
            let b = single_scale_functional(&om, &p, q, 3).unwrap();
            assert!((a - b).abs() <= 0.01 * a, "p={q}: {a} vs {b}");
        }
        let inf = single_scale_functional(&om, &p, f64::INFINITY, 1).unwrap();
        assert!(inf > 0.0 && inf <= 16.0 * om.sup_norm());
    }

    fn grid32() -> Grid {
        Grid::line(4.0, 32).unwrap()
    }

    fn rand_fn(grid: Grid, seed: u64) -> SampledFunction {
        random_test_function(
            grid,
            seed,
            Smoothness::RoughIndicator,
            &GridRegion::interval(-3.0, 3.0).unwrap(),
            1.0,
        )
        .unwrap()
    }

    /// Direct triple sum with scale pieces evaluated one by one.
    fn brute_apply(
        om: &OmegaSpec,
        f1: &SampledFunction,
        f2: &SampledFunction,
        w: &TruncationWindow,
    ) -> Vec<f64> {
        let g = f1.grid();
        let n = g.cells();
        let h = g.step();
        (0..n)
            .map(|x| {
                let mut total = 0.0;
                for y1 in 0..n {
                    for y2 in 0..n {
                        let z = [(x as f64 - y1 as f64) * h, (x as f64 - y2 as f64) * h];
                        if z == [0.0, 0.0] {
                            continue;
                        }
                        let k: f64 = w
                            .scales()
                            .map(|s| single_scale_kernel(om, &part(), s, z).unwrap())
                            .sum();
                        total += f1.values()[y1] * f2.values()[y2] * k * h * h;
                    }
                }
                total
            })
            .collect()
    }

    #[test]
    fn apply_matches_brute_force() {
        let g = grid32();
        for (i, om) in [OmegaSpec::commutator(), OmegaSpec::smooth_sin(3).unwrap()]
            .iter()
            .enumerate()
        {
            let f1 = rand_fn(g, 10 + i as u64);
            let f2 = rand_fn(g, 20 + i as u64);
            let w = TruncationWindow::new(-3, 3);
            let fast = apply_truncated(om, &part(), &f1, &f2, &w).unwrap();
            let slow = brute_apply(om, &f1, &f2, &w);
            let scale = slow.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
            for (a, b) in fast.values().iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn apply_trivial_cases() {
        let g = grid32();
        let f1 = rand_fn(g, 1);
        let f2 = rand_fn(g, 2);
        let om = OmegaSpec::commutator();
        let empty = apply_truncated(&om, &part(), &f1, &f2, &TruncationWindow::new(2, 3)).unwrap();
        assert!(empty.is_zero());
        let w = TruncationWindow::new(-3, 2);
        assert!(apply_truncated(&OmegaSpec::zero(), &part(), &f1, &f2, &w)
            .unwrap()
            .is_zero());
        let once = apply_truncated(&om, &part(), &f1, &f2, &w).unwrap();
        let twice = apply_truncated(&om, &part(), &f1.scaled(2.0), &f2, &w).unwrap();
        assert_eq!(twice, once.scaled(2.0));
        let other = SampledFunction::zeros(Grid::line(4.0, 64).unwrap());
        assert!(apply_truncated(&om, &part(), &f1, &other, &w).is_err());
    }

    #[test]
    fn forms_are_additive_over_windows() {
        let g = Grid::line(8.0, 128).unwrap();
        let om = OmegaSpec::commutator();
        let (f1, f2, f3) = (rand_fn(g, 3), rand_fn(g, 4), rand_fn(g, 5));
        let whole =
            trilinear_form(&om, &part(), &f1, &f2, &f3, &TruncationWindow::new(-3, 3)).unwrap();
        // scales -2..=0 and 1..=2
        let lo =
            trilinear_form(&om, &part(), &f1, &f2, &f3, &TruncationWindow::new(-3, 1)).unwrap();
        let hi = trilinear_form(&om, &part(), &f1, &f2, &f3, &TruncationWindow::new(0, 3)).unwrap();
        assert!((whole - lo - hi).abs() <= 1e-12 * whole.abs().max(lo.abs()).max(1e-300));
        let zero = SampledFunction::zeros(g);
        assert_eq!(
            trilinear_form(&om, &part(), &f1, &zero, &f3, &TruncationWindow::new(-3, 3)).unwrap(),
            0.0
        );
    }

    #[test]
    fn single_scale_output_ignores_far_inputs() {
        let g = Grid::line(8.0, 256).unwrap();
        let om = OmegaSpec::commutator();
        let s = 0;
        let w = TruncationWindow::single(s);
        let f1 = rand_fn(g, 7);
        let f2 = rand_fn(g, 8);
        let base = apply_truncated(&om, &part(), &f1, &f2, &w).unwrap();
        let x = 128usize;
        let xc = g.center(x);
        let far = |k: usize| (g.center(k) - xc).abs() > 2f64.powi(s);
        let p1 = SampledFunction::new(
            g,
            f1.values()
                .iter()
                .enumerate()
                .map(|(k, v)| if far(k) { v + 5.0 } else { *v })
                .collect(),
        )
        .unwrap();
        let p2 = SampledFunction::new(
            g,
            f2.values()
                .iter()
                .enumerate()
                .map(|(k, v)| if far(k) { -3.0 } else { *v })
                .collect(),
        )
        .unwrap();
        let moved = apply_truncated(&om, &part(), &p1, &p2, &w).unwrap();
        assert_eq!(moved.values()[x], base.values()[x]);
    }

    fn lattice() -> LatticeGrid {
        LatticeGrid::new(
            Grid::line(8.0, 256).unwrap(),
            DyadicLattice::new(0.0, -4, 1).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn localized_forms() {
        let lg = lattice();
        let g = *lg.grid();
        let om = OmegaSpec::commutator();
        let w = TruncationWindow::new(-4, 2);
        let l = Cube::new(-1, 1);
        let (f1, f2, f3) = (rand_fn(g, 31), rand_fn(g, 32), rand_fn(g, 33));
        let plain = lambda_localized(&om, &part(), &lg, l, &f1, &f2, &f3, &w).unwrap();
        let three = lg.dilate_span(l, 3);
        let cut = lambda_localized(
            &om,
            &part(),
            &lg,
            l,
            &f1,
            &f2.restricted(three.clone()),
            &f3.restricted(three),
            &w,
        )
        .unwrap();
        assert!((plain - cut).abs() <= 1e-12 * plain.abs().max(1e-300));

        let zero = SampledFunction::zeros(g);
        assert_eq!(
            lambda_localized(&om, &part(), &lg, l, &zero, &f2, &f3, &w).unwrap(),
            0.0
        );

        // window top below s_L: the cap does nothing
        let narrow = TruncationWindow::new(-4, 0);
        let big = Cube::new(1, 0);
        let capped = lambda_localized(&om, &part(), &lg, big, &f1, &f2, &f3, &narrow).unwrap();
        let direct = trilinear_form(
            &om,
            &part(),
            &f1.restricted(lg.cube_span(big)),
            &f2,
            &f3,
            &narrow,
        )
        .unwrap();
        assert!((capped - direct).abs() <= 1e-12 * direct.abs().max(1e-300));
    }

    #[test]
    fn lambda_p_cases() {
        let lg = lattice();
        let g = *lg.grid();
        let om = OmegaSpec::commutator();
        let w = TruncationWindow::new(-5, 2);
        let q = Cube::new(1, 0);
        let sup = |seed| {
            random_test_function(
                g,
                seed,
                Smoothness::BumpSum,
                &GridRegion::interval(-2.0, 4.0).unwrap(),
                1.0,
            )
            .unwrap()
        };
        let f1 = sup(1).restricted(lg.cube_span(q));
        let (f2, f3) = (sup(2), sup(3));
        let empty = StoppingCollection {
            top: q,
            members: vec![],
        };
        let lp = lambda_p(&om, &part(), &lg, &empty, &f1, &f2, &f3, &w).unwrap();
        let lq = lambda_localized(&om, &part(), &lg, q, &f1, &f2, &f3, &w).unwrap();
        assert_eq!(lp, lq);
        let zero = SampledFunction::zeros(g);
        assert_eq!(
            lambda_p(&om, &part(), &lg, &empty, &zero, &f2, &f3, &w).unwrap(),
            0.0
        );
        assert!(lambda_p(&om, &part(), &lg, &empty, &f2, &f2, &f3, &w).is_err());

        // b mean-zero inside one member: only scales above s_L survive
        let l = Cube::new(-2, 2);
        let span = lg.cube_span(l);
        let mid = (span.start + span.end) / 2;
        let b = SampledFunction::new(
            g,
            (0..g.cells())
                .map(|k| {
                    if span.contains(&k) {
                        if k < mid {
                            1.0
                        } else {
                            -1.0
                        }
                    } else {
                        0.0
                    }
                })
                .collect(),
        )
        .unwrap();
        let coll = StoppingCollection {
            top: q,
            members: vec![l, Cube::new(-3, 0)],
        };
        let mut ev = FormEvaluator::new(&om, &part(), g, w);
        let lhs = ev.lambda_p(&lg, &coll, &b, &f2, &f3).unwrap();
        let high = TruncationWindow::new(l.level, w.capped(q.level).nu);
        let rhs = ev.scale_range_form(high, &b, &f2, &f3, 0..g.cells());
        assert!(
            (lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1e-300),
            "{lhs} vs {rhs}"
        );
    }

    #[test]
    fn ct_estimates() {
        let g = Grid::line(8.0, 64).unwrap();
        let w = TruncationWindow::new(-4, 4);
        let zero = estimate_ct(&OmegaSpec::zero(), &part(), g, (2.0, 2.0, 1.0), &w, 5, 1).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let run = estimate_ct(
            &OmegaSpec::commutator(),
            &part(),
            g,
            (2.0, 2.0, 1.0),
            &w,
            12,
            1,
        )
        .unwrap();
        assert!(run.windows(2).all(|p| p[1] >= p[0]));
        assert!(run.last().unwrap().is_finite() && *run.last().unwrap() > 0.0);
        assert!(estimate_ct(
            &OmegaSpec::commutator(),
            &part(),
            g,
            (2.0, 2.0, 2.0),
            &w,
            1,
            1
        )
        .is_err());
    }
}
