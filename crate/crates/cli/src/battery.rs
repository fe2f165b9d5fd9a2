//! The acceptance battery: brute-force oracles and one check per criterion.

use std::collections::BTreeMap;
use std::time::Instant;

use anyhow::{anyhow, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sparsedom::dyadic::{Cube, DyadicLattice, LatticeGrid, StoppingCollection};
use sparsedom::grid::{
    derive_seed, lp_norm, random_test_function, Grid, GridRegion, SampledFunction, Smoothness,
};
use sparsedom::kernel::{
    apply_truncated, apply_with_table, single_scale_functional, FormEvaluator, KernelTable,
    OmegaSpec, ScalePartition, TruncationWindow,
};
use sparsedom::localnorms::{check_dplerner, maximal_function, CubeFamily};
use sparsedom::lp::{annular_weight, estimate_piece_decay};
use sparsedom::sparse::{domination_reports, psf_eval, random_stopping_collection, DEFAULT_CD};
use sparsedom::weights::{
    ap_characteristic, multilinear_characteristic, product_power_triple, weighted_estimate_report,
    weighted_inputs, weighted_norm, weighted_ratio, Weight, WeightedKind, DEFAULT_AP_CEILING,
};

use crate::experiments::{check_build, cz_case, cz_check, num};
use crate::inputs::{lattice_triple, InputPreset};

/// Result of one criterion. Everything here is a pure function of the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub metrics: BTreeMap<String, Value>,
    pub notes: Vec<String>,
}

/// Wall-clock side of a criterion, kept out of the numeric payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionTiming {
    pub id: u8,
    pub seconds: f64,
    /// Time of the slowest unit the limit applies to (the whole criterion or one build).
    pub timed_unit_seconds: f64,
    pub limit_seconds: Option<f64>,
    pub within_limit: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuitePayload {
    pub seed: u64,
    pub outcomes: Vec<CriterionOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub schema_version: u32,
    pub library_version: String,
    pub payload: SuitePayload,
    pub timings: Vec<CriterionTiming>,
    pub wall_clock_seconds: f64,
}

impl SuiteReport {
    pub fn payload_json(&self) -> String {
        serde_json::to_string(&self.payload).expect("payload serializes")
    }

    pub fn all_passed(&self) -> bool {
        self.payload.outcomes.iter().all(|o| o.passed)
            && self.timings.iter().all(|t| t.within_limit)
    }
}

struct Outcome {
    passed: bool,
    metrics: BTreeMap<String, Value>,
    notes: Vec<String>,
    /// Slowest timed unit when the limit is per unit rather than per criterion.
    unit_seconds: Option<f64>,
}

impl Outcome {
    fn new(passed: bool) -> Self {
        Self {
            passed,
            metrics: BTreeMap::new(),
            notes: Vec::new(),
            unit_seconds: None,
        }
    }

    fn metric(mut self, key: &str, v: Value) -> Self {
        self.metrics.insert(key.into(), v);
        self
    }

    fn note(mut self, n: impl Into<String>) -> Self {
        self.notes.push(n.into());
        self
    }
}

type Check = fn(u64) -> Result<Outcome>;

const CRITERIA: [(u8, &str, Option<f64>, Check); 9] = [
    (1, "calderon-zygmund decomposition", Some(30.0), cz_suite),
    (
        2,
        "partition of unity and single-scale support",
        None,
        partition_suite,
    ),
    (3, "oracle equivalence", Some(120.0), oracle_suite),
    (4, "single-scale homogeneity", None, homogeneity_suite),
    (5, "sparse construction", Some(60.0), sparse_suite),
    (6, "sparse domination", None, domination_suite),
    (7, "littlewood-paley decay", Some(600.0), lp_suite),
    (8, "weighted experiments", None, weighted_suite),
    (9, "di plinio-lerner inequality", None, dplerner_suite),
];

/// Criterion ids and names in suite order.
pub fn criteria() -> Vec<(u8, &'static str)> {
    CRITERIA.iter().map(|c| (c.0, c.1)).collect()
}

/// Runs criteria 1 to 9. Determinism across runs is checked by comparing
/// the payloads of two suite runs.
pub fn run_suite(seed: u64, only: Option<&[u8]>) -> SuiteReport {
    let start = Instant::now();
    let mut outcomes = Vec::new();
    let mut timings = Vec::new();
    for &(id, name, limit, check) in &CRITERIA {
        if only.is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let out = check(derive_seed(seed, u64::from(id)))
            .unwrap_or_else(|e| Outcome::new(false).note(format!("error: {e:#}")));
        let seconds = t0.elapsed().as_secs_f64();
        let unit = out.unit_seconds.unwrap_or(seconds);
        timings.push(CriterionTiming {
            id,
            seconds,
            timed_unit_seconds: unit,
            limit_seconds: limit,
            within_limit: limit.is_none_or(|l| unit < l),
        });
        outcomes.push(CriterionOutcome {
            id,
            name: name.into(),
            passed: out.passed,
            metrics: out.metrics,
            notes: out.notes,
        });
    }
    SuiteReport {
        schema_version: crate::report::SCHEMA_VERSION,
        library_version: env!("CARGO_PKG_VERSION").into(),
        payload: SuitePayload { seed, outcomes },
        timings,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    }
}

/// Uniform draw in `[0, 1)` from a seed stream.
fn unit(seed: u64, i: u64) -> f64 {
    (derive_seed(seed, i) >> 11) as f64 / (1u64 << 53) as f64
}

fn pick(seed: u64, i: u64, n: usize) -> usize {
    (derive_seed(seed, i) % n as u64) as usize
}

fn rel(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

/// `max |a - b| / max |b|`.
fn rel_sup(a: &[f64], b: &[f64]) -> f64 {
    let d = a
        .iter()
        .zip(b)
        .fold(0.0, |m: f64, (x, y)| m.max((x - y).abs()));
    let s = b.iter().fold(0.0, |m: f64, y| m.max(y.abs()));
    if d == 0.0 {
        0.0
    } else {
        d / s
    }
}

fn max_of(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, f64::max)
}

fn line(half_width: f64, cells: usize) -> Grid {
    Grid::line(half_width, cells).expect("valid grid")
}

fn lattice_grid(grid: Grid, shift: f64, s_min: i32, s_max: i32) -> LatticeGrid {
    LatticeGrid::new(
        grid,
        DyadicLattice::new(shift, s_min, s_max).expect("valid lattice"),
    )
    .expect("lattice fits grid")
}

fn rough(grid: Grid, seed: u64, support: &GridRegion) -> Result<SampledFunction> {
    Ok(random_test_function(
        grid,
        seed,
        Smoothness::RoughIndicator,
        support,
        1.0,
    )?)
}

fn bump(grid: Grid, seed: u64, support: &GridRegion) -> Result<SampledFunction> {
    Ok(random_test_function(
        grid,
        seed,
        Smoothness::BumpSum,
        support,
        1.0,
    )?)
}

fn positive_weight(grid: Grid, seed: u64) -> Weight {
    let v = (0..grid.cells())
        .map(|i| 0.05 + 4.0 * unit(seed, i as u64))
        .collect();
    Weight::new(SampledFunction::new(grid, v).expect("finite"), "random").expect("positive")
}

pub mod oracle {
    //! Direct loops, written without the library's prefix sums or caches.

    use sparsedom::dyadic::Cube;
    use sparsedom::grid::{Grid, SampledFunction};
    use sparsedom::kernel::{single_scale_kernel, OmegaSpec, ScalePartition, TruncationWindow};

    /// Cell range of the lattice cube `[shift + a 2^l, shift + (a + 1) 2^l)`.
    pub fn cube_range(grid: &Grid, shift: f64, q: Cube) -> (i64, i64) {
        let side = 2f64.powi(q.level);
        let lo = shift + q.anchor as f64 * side;
        let to_cell = |x: f64| ((x + grid.half_width()) / grid.step()).round() as i64;
        (to_cell(lo), to_cell(lo + side))
    }

    /// Every lattice cube with levels in `levels` lying inside the grid.
    pub fn dyadic_ranges(
        grid: &Grid,
        shift: f64,
        levels: std::ops::RangeInclusive<i32>,
    ) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let r = grid.half_width();
        for level in levels {
            let side = 2f64.powi(level);
            let first = ((-r - shift) / side).ceil() as i64;
            let mut a = first;
            loop {
                let (s, e) = cube_range(grid, shift, Cube::new(level, a));
                if e > grid.cells() as i64 {
                    break;
                }
                if s >= 0 {
                    out.push((s as usize, e as usize));
                }
                a += 1;
            }
        }
        out
    }

    fn mean_abs_pow(v: &[f64], p: f64) -> f64 {
        let mut s = 0.0;
        for x in v {
            s += x.abs().powf(p);
        }
        s / v.len() as f64
    }

    /// `Σ_Q |Q| Π_i (f_i)_{p_i, Q}`.
    pub fn psf(
        grid: &Grid,
        shift: f64,
        cubes: &[Cube],
        p: [f64; 3],
        fs: [&SampledFunction; 3],
    ) -> f64 {
        let mut total = 0.0;
        for &q in cubes {
            let (a, b) = cube_range(grid, shift, q);
            let (a, b) = (a as usize, b as usize);
            let mut term = (b - a) as f64 * grid.step();
            for i in 0..3 {
                let v = &fs[i].values()[a..b];
                term *= mean_abs_pow(v, p[i]).powf(1.0 / p[i]);
            }
            total += term;
        }
        total
    }

    /// `sup over ranges containing cell x of (mean |f|^p)^{1/p}`.
    pub fn maximal_at(values: &[f64], p: f64, x: usize, ranges: &[(usize, usize)]) -> f64 {
        let mut best: f64 = 0.0;
        for &(a, b) in ranges {
            if a <= x && x < b {
                best = best.max(mean_abs_pow(&values[a..b], p).powf(1.0 / p));
            }
        }
        best
    }

    pub fn all_ranges(n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..n {
            for b in a + 1..=n {
                out.push((a, b));
            }
        }
        out
    }

    fn mean(v: &[f64]) -> f64 {
        let mut s = 0.0;
        for x in v {
            s += x;
        }
        s / v.len() as f64
    }

    pub fn ap(w: &[f64], p: f64, ranges: &[(usize, usize)]) -> f64 {
        let dual: Vec<f64> = w.iter().map(|x| x.powf(-1.0 / (p - 1.0))).collect();
        let mut best: f64 = 0.0;
        for &(a, b) in ranges {
            best = best.max(mean(&w[a..b]) * mean(&dual[a..b]).powf(p - 1.0));
        }
        best
    }

    pub fn multilinear(v: [&[f64]; 3], p: [f64; 3], q: [f64; 3], ranges: &[(usize, usize)]) -> f64 {
        let powered: Vec<Vec<f64>> = (0..3)
            .map(|i| v[i].iter().map(|x| x.powf(p[i] / (p[i] - q[i]))).collect())
            .collect();
        let mut best: f64 = 0.0;
        for &(a, b) in ranges {
            let mut prod = 1.0;
            for i in 0..3 {
                prod *= mean(&powered[i][a..b]).powf(1.0 / p[i] - 1.0 / q[i]);
            }
            best = best.max(prod);
        }
        best
    }

    /// `T(f1, f2)(x)` as a double sum over sample pairs and a sum over scales.
    pub fn truncated(
        omega: &OmegaSpec,
        f1: &[f64],
        f2: &[f64],
        h: f64,
        window: &TruncationWindow,
    ) -> Vec<f64> {
        let n = f1.len();
        let mut out = vec![0.0; n];
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for y1 in 0..n {
                for y2 in 0..n {
                    if y1 == x && y2 == x {
                        continue;
                    }
                    let y = [(x as f64 - y1 as f64) * h, (x as f64 - y2 as f64) * h];
                    let mut k = 0.0;
                    for s in window.scales() {
                        k += single_scale_kernel(omega, &ScalePartition, s, y)
                            .expect("nonzero offset");
                    }
                    acc += f1[y1] * f2[y2] * k * h * h;
                }
            }
            *o = acc;
        }
        out
    }
}

fn cz_suite(seed: u64) -> Result<Outcome> {
    let lg = lattice_grid(line(32.0, 512), 0.0, -3, 4);
    let ps = [1.0, 1.5, 2.0, 4.0];
    let checks = (0..100u64)
        .into_par_iter()
        .map(|t| {
            let (h, coll) = cz_case(&lg, derive_seed(seed, t))?;
            cz_check(&h, &coll, &lg, ps[t as usize % ps.len()])
        })
        .collect::<Result<Vec<_>>>()?;
    let ratio = |f: fn(&crate::experiments::CzCheck) -> f64| {
        max_of(checks.iter().filter(|c| c.h_y > 0.0).map(|c| f(c) / c.h_y))
    };
    let failures = checks.iter().filter(|c| !c.passes()).count();
    Ok(Outcome::new(failures == 0)
        .metric("pairs", json!(checks.len()))
        .metric("cells", json!(lg.cells()))
        .metric("failures", json!(failures))
        .metric("inexact", json!(checks.iter().filter(|c| !c.exact).count()))
        .metric(
            "max_mean_defect",
            num(max_of(checks.iter().map(|c| c.mean_defect))),
        )
        .metric("max_good_ratio", num(ratio(|c| c.g_sup)))
        .metric("max_bad_ratio", num(ratio(|c| c.b_x)))
        .metric(
            "members_total",
            json!(checks.iter().map(|c| c.members).sum::<usize>()),
        ))
}

fn partition_suite(seed: u64) -> Result<Outcome> {
    let part = ScalePartition;
    let (mu, nu) = (-20, 20);
    let mut phi_err: f64 = 0.0;
    let mut beta_err: f64 = 0.0;
    for i in 0..10_000u64 {
        let r = 2f64.powf(f64::from(mu) + f64::from(nu - mu) * unit(seed, 2 * i));
        let sum: f64 = (mu - 2..=nu + 2).map(|s| part.phi_s(s, r)).sum();
        phi_err = phi_err.max((sum - 1.0).abs());
        let theta = std::f64::consts::TAU * unit(seed, 2 * i + 1);
        let z = [r * theta.cos(), r * theta.sin()];
        let sum: f64 = (mu - 3..=nu + 1).map(|j| annular_weight(j, z)).sum();
        beta_err = beta_err.max((sum - 1.0).abs());
    }

    let grid = line(8.0, 128);
    let full = grid.full_region();
    let omegas = [
        OmegaSpec::commutator(),
        OmegaSpec::smooth_sin(3)?,
        OmegaSpec::random_bounded(seed, 64)?,
    ];
    let mut perturb_failures = 0;
    let mut perturbed_cells = 0;
    for c in 0..20u64 {
        let cs = derive_seed(seed, 100 + c);
        let omega = &omegas[c as usize % omegas.len()];
        let s = -2 + pick(cs, 0, 4) as i32;
        let window = TruncationWindow::single(s);
        let f1 = rough(grid, derive_seed(cs, 1), &full)?;
        let f2 = bump(grid, derive_seed(cs, 2), &full)?;
        let x = pick(cs, 3, grid.cells());
        let far = |k: usize| (grid.center(k) - grid.center(x)).abs() > 2f64.powi(s);
        let mut g1 = f1.values().to_vec();
        let mut g2 = f2.values().to_vec();
        for k in 0..grid.cells() {
            if far(k) {
                perturbed_cells += 1;
                g1[k] += 1e3 * (unit(cs, 10 + k as u64) - 0.5);
                g2[k] -= 1e3 * (unit(cs, 5000 + k as u64) - 0.5);
            }
        }
        let g1 = SampledFunction::new(grid, g1)?;
        let g2 = SampledFunction::new(grid, g2)?;
        let before = apply_truncated(omega, &part, &f1, &f2, &window)?.values()[x];
        let after = apply_truncated(omega, &part, &g1, &g2, &window)?.values()[x];
        if before != after {
            perturb_failures += 1;
        }
    }
    Ok(
        Outcome::new(phi_err <= 1e-10 && beta_err <= 1e-10 && perturb_failures == 0)
            .metric("phi_sum_max_error", num(phi_err))
            .metric("beta_sum_max_error", num(beta_err))
            .metric("points", json!(10_000))
            .metric("perturbation_cases", json!(20))
            .metric("perturbation_failures", json!(perturb_failures))
            .metric("perturbed_cells", json!(perturbed_cells)),
    )
}

fn oracle_suite(seed: u64) -> Result<Outcome> {
    // psf_eval
    let grid = line(16.0, 256);
    let lg = lattice_grid(grid, 0.0, -3, 3);
    let full = grid.full_region();
    let mut psf_err: f64 = 0.0;
    for c in 0..20u64 {
        let cs = derive_seed(seed, c);
        let fs: Vec<SampledFunction> = (0..3)
            .map(|i| rough(grid, derive_seed(cs, i), &full))
            .collect::<Result<_>>()?;
        let fs = [&fs[0], &fs[1], &fs[2]];
        let p = [
            1.0 + 2.0 * unit(cs, 10),
            1.0 + 2.0 * unit(cs, 11),
            1.0 + 2.0 * unit(cs, 12),
        ];
        let cubes: Vec<Cube> = (0..1 + pick(cs, 13, 8) as u64)
            .map(|i| {
                let level = -3 + pick(cs, 20 + i, 7) as i32;
                let count = (32.0 / 2f64.powi(level)) as usize;
                Cube::new(level, pick(cs, 40 + i, count) as i64 - count as i64 / 2)
            })
            .collect();
        let got = psf_eval(&lg, &cubes, p, fs)?;
        psf_err = psf_err.max(rel(got, oracle::psf(&grid, 0.0, &cubes, p, fs)));
    }

    // maximal_function at sampled points
    let all = oracle::all_ranges(grid.cells());
    let dyadic = oracle::dyadic_ranges(&grid, 0.0, -3..=3);
    let mut max_err: f64 = 0.0;
    for (c, p) in [1.0, 1.5, 2.0, 3.0].into_iter().enumerate() {
        let cs = derive_seed(seed, 100 + c as u64);
        let f = if c % 2 == 0 {
            rough(grid, cs, &full)?
        } else {
            bump(grid, cs, &full)?
        };
        for (family, ranges) in [
            (CubeFamily::AllIntervals, &all),
            (CubeFamily::Dyadic(lg), &dyadic),
        ] {
            let m = maximal_function(&f, p, &family)?;
            for i in 0..50u64 {
                let x = pick(cs, 200 + i, grid.cells());
                max_err = max_err.max(rel(
                    m.values()[x],
                    oracle::maximal_at(f.values(), p, x, ranges),
                ));
            }
        }
    }

    // ap_characteristic
    let wgrid = line(1.0, 128);
    let wlg = lattice_grid(wgrid, 0.0, -6, 0);
    let wall = oracle::all_ranges(wgrid.cells());
    let wdy = oracle::dyadic_ranges(&wgrid, 0.0, -6..=0);
    let mut ap_err: f64 = 0.0;
    let weights = [
        Weight::power(wgrid, 0.5)?,
        Weight::power(wgrid, -0.4)?,
        positive_weight(wgrid, derive_seed(seed, 300)),
    ];
    for w in &weights {
        for p in [1.5, 2.0, 3.0] {
            for (family, ranges) in [
                (CubeFamily::AllIntervals, &wall),
                (CubeFamily::Dyadic(wlg), &wdy),
            ] {
                let got = ap_characteristic(w, p, &family)?;
                ap_err = ap_err.max(rel(got, oracle::ap(w.function().values(), p, ranges)));
            }
        }
    }

    // multilinear_characteristic
    let mut ml_err: f64 = 0.0;
    let q = [4.0, 4.0, 2.0];
    let p = [1.1, 1.3, 1.5];
    let mut triples = vec![
        product_power_triple(wgrid, 0.3, -0.2, q)?,
        product_power_triple(wgrid, -0.1, 0.25, q)?,
    ];
    let (v1, v2) = (
        positive_weight(wgrid, derive_seed(seed, 301)),
        positive_weight(wgrid, derive_seed(seed, 302)),
    );
    let v3: Vec<f64> = v1
        .function()
        .values()
        .iter()
        .zip(v2.function().values())
        .map(|(a, b)| (a.powf(1.0 / q[0]) * b.powf(1.0 / q[1])).powf(-q[2]))
        .collect();
    triples.push([
        v1,
        v2,
        Weight::new(SampledFunction::new(wgrid, v3)?, "completed")?,
    ]);
    for v in &triples {
        let refs = [&v[0], &v[1], &v[2]];
        let vals = [
            v[0].function().values(),
            v[1].function().values(),
            v[2].function().values(),
        ];
        for (family, ranges) in [
            (CubeFamily::AllIntervals, &wall),
            (CubeFamily::Dyadic(wlg), &wdy),
        ] {
            let got = multilinear_characteristic(refs, p, q, &family)?;
            ml_err = ml_err.max(rel(got, oracle::multilinear(vals, p, q, ranges)));
        }
    }

    // apply_truncated on 32 cells
    let tgrid = line(2.0, 32);
    let tfull = tgrid.full_region();
    let window = TruncationWindow::new(-4, 1);
    let mut trunc_err: f64 = 0.0;
    for (c, omega) in [
        OmegaSpec::commutator(),
        OmegaSpec::smooth_sin(3)?,
        OmegaSpec::random_bounded(seed, 64)?,
    ]
    .iter()
    .enumerate()
    {
        let cs = derive_seed(seed, 400 + c as u64);
        let f1 = rough(tgrid, derive_seed(cs, 1), &tfull)?;
        let f2 = bump(tgrid, derive_seed(cs, 2), &tfull)?;
        let got = apply_truncated(omega, &ScalePartition, &f1, &f2, &window)?;
        let want = oracle::truncated(omega, f1.values(), f2.values(), tgrid.step(), &window);
        trunc_err = trunc_err.max(rel_sup(got.values(), &want));
    }

    let passed = psf_err <= 1e-12
        && max_err <= 1e-10
        && ap_err <= 1e-10
        && ml_err <= 1e-10
        && trunc_err <= 1e-12;
    Ok(Outcome::new(passed)
        .metric("psf_eval_rel_error", num(psf_err))
        .metric("maximal_function_rel_error", num(max_err))
        .metric("ap_characteristic_rel_error", num(ap_err))
        .metric("multilinear_characteristic_rel_error", num(ml_err))
        .metric("apply_truncated_rel_error", num(trunc_err))
        .note("apply_truncated error is relative to the oracle's sup norm"))
}

fn homogeneity_suite(_seed: u64) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut metrics = BTreeMap::new();
    for omega in [
        OmegaSpec::commutator(),
        OmegaSpec::smooth_sin(1)?,
        OmegaSpec::smooth_sin(3)?,
    ] {
        for p in [1.5, 2.0, 4.0] {
            let vals: Vec<f64> = (-4..=4)
                .map(|s| single_scale_functional(&omega, &ScalePartition, p, s))
                .collect::<sparsedom::Result<_>>()?;
            let hi = vals.iter().copied().fold(f64::MIN, f64::max);
            let lo = vals.iter().copied().fold(f64::MAX, f64::min);
            let spread = if lo > 0.0 {
                hi / lo - 1.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(spread);
            metrics.insert(format!("{}_p{p}_spread", omega.name()), num(spread));
        }
    }
    let mut out = Outcome::new(worst < 0.01).metric("max_relative_spread", num(worst));
    out.metrics.extend(metrics);
    Ok(out)
}

fn sparse_suite(seed: u64) -> Result<Outcome> {
    let lg = lattice_grid(line(512.0, 4096), 0.0, -2, 8);
    let runs = (0..50u64)
        .into_par_iter()
        .map(|t| {
            let fs = lattice_triple(&lg, [InputPreset::Spiky; 3], derive_seed(seed, t))?;
            let t0 = Instant::now();
            let check = check_build(&lg, [&fs[0], &fs[1], &fs[2]], [1.1, 1.1, 1.1], DEFAULT_CD)?;
            Ok((check, t0.elapsed().as_secs_f64()))
        })
        .collect::<Result<Vec<_>>>()?;
    let checks: Vec<_> = runs.iter().map(|r| &r.0).collect();
    let failures = checks.iter().filter(|c| !c.passes()).count();
    let mut out = Outcome::new(failures == 0)
        .metric("triples", json!(checks.len()))
        .metric("cells", json!(lg.cells()))
        .metric("c_d", num(DEFAULT_CD))
        .metric("failures", json!(failures))
        .metric(
            "failing_collections",
            json!(checks.iter().map(|c| c.failing_collections).sum::<usize>()),
        )
        .metric(
            "min_eta",
            num(checks.iter().map(|c| c.measured_eta).fold(1.0, f64::min)),
        )
        .metric(
            "max_exceptional_ratio",
            num(max_of(checks.iter().map(|c| c.max_exceptional_ratio))),
        )
        .metric("max_levels", json!(checks.iter().map(|c| c.levels).max()))
        .metric(
            "multi_level_builds",
            json!(checks.iter().filter(|c| c.levels > 1).count()),
        )
        .metric(
            "stalled",
            json!(checks.iter().filter(|c| c.stalled).count()),
        )
        .note("inputs carry tall single-cell spikes so the construction recurses");
    out.unit_seconds = Some(max_of(runs.iter().map(|r| r.1)));
    Ok(out)
}

/// Dominating ratios per trial, one entry per window.
///
/// The data live on `[0, 4)` and its triple inside the lattice top, so both
/// windows cover their scales.
fn domination_batch(
    lg: &LatticeGrid,
    omega: &OmegaSpec,
    windows: &[TruncationWindow],
    seed: u64,
) -> Result<Vec<Vec<(f64, bool)>>> {
    let grid = *lg.grid();
    let q = GridRegion::interval(0.0, 4.0)?;
    let three = GridRegion::interval(-4.0, 8.0)?;
    (0..50u64)
        .into_par_iter()
        .map(|t| {
            let ts = derive_seed(seed, t);
            let f1 = bump(grid, derive_seed(ts, 1), &q)?;
            let f2 = rough(grid, derive_seed(ts, 2), &three)?;
            let f3 = bump(grid, derive_seed(ts, 3), &three)?;
            let reps = domination_reports(
                omega,
                &ScalePartition,
                lg,
                [&f1, &f2, &f3],
                [1.1; 3],
                windows,
                DEFAULT_CD,
            )?;
            Ok(reps.iter().map(|r| (r.ratio, r.anomaly)).collect())
        })
        .collect()
}

/// `Λ_P(b, g, h)` against the scale-by-scale sum over scales above `s_L`.
fn cancellation_case(seed: u64) -> Result<(f64, Cube)> {
    let lg = lattice_grid(line(16.0, 128), 0.0, -2, 2);
    let window = TruncationWindow::new(-4, 4);
    let omega = OmegaSpec::commutator();
    let (coll, l) = (0..64u64)
        .find_map(|k| {
            let coll: StoppingCollection = random_stopping_collection(&lg, derive_seed(seed, k));
            let l = coll
                .members
                .iter()
                .copied()
                .find(|l| coll.top.contains(l) && lg.cube_span(*l).len() > 1)?;
            Some((coll, l))
        })
        .ok_or_else(|| anyhow!("no stopping collection with a wide member inside the top"))?;
    let grid = *lg.grid();
    let span = lg.cube_span(l);
    let mut b = vec![0.0; grid.cells()];
    let mut sum = 0.0;
    for k in span.start..span.end - 1 {
        b[k] = (pick(seed, 1000 + k as u64, 2001) as f64 - 1000.0) / 1024.0;
        sum += b[k];
    }
    b[span.end - 1] = -sum;
    let b = SampledFunction::new(grid, b)?;
    let (_, three) = crate::inputs::top_regions(&lg);
    let g = rough(grid, derive_seed(seed, 900), &three)?;
    let h = bump(grid, derive_seed(seed, 901), &three)?;
    let mut ev = FormEvaluator::new(&omega, &ScalePartition, grid, window);
    let lhs = ev.lambda_p(&lg, &coll, &b, &g, &h)?;
    let top = window.capped(coll.top.level).top();
    let rhs: f64 = (window.mu.max(l.level) + 1..=top)
        .map(|s| ev.scale_range_form(TruncationWindow::single(s), &b, &g, &h, 0..grid.cells()))
        .sum();
    Ok((rel(lhs, rhs), l))
}

fn domination_suite(seed: u64) -> Result<Outcome> {
    let lg = lattice_grid(line(128.0, 8192), 0.0, -5, 6);
    let omega = OmegaSpec::commutator();
    let windows = [TruncationWindow::new(-4, 4), TruncationWindow::new(-6, 6)];
    let rows = domination_batch(&lg, &omega, &windows, derive_seed(seed, 1))?;
    let all = || rows.iter().flatten();
    let nonfinite = all().filter(|r| !r.0.is_finite()).count();
    let anomalies = all().filter(|r| r.1).count();
    let batch_max: Vec<f64> = (0..windows.len())
        .map(|w| max_of(rows.iter().map(|r| r[w].0)))
        .collect();
    let (lo, hi) = (
        batch_max[0].min(batch_max[1]),
        batch_max[0].max(batch_max[1]),
    );
    let change = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    let cases = (0..10u64)
        .map(|c| cancellation_case(derive_seed(seed, 50 + c)))
        .collect::<Result<Vec<_>>>()?;
    let cancel_err = max_of(cases.iter().map(|c| c.0));
    Ok(
        Outcome::new(nonfinite == 0 && anomalies == 0 && change < 2.0 && cancel_err <= 1e-10)
            .metric("cells", json!(lg.cells()))
            .metric("data_support", json!([0.0, 4.0]))
            .metric("batch_max_narrow", num(batch_max[0]))
            .metric("batch_max_wide", num(batch_max[1]))
            .metric("window_change_factor", num(change))
            .metric("nonfinite_ratios", json!(nonfinite))
            .metric("anomalies", json!(anomalies))
            .metric("cancellation_cases", json!(cases.len()))
            .metric("cancellation_rel_error", num(cancel_err))
            .metric(
                "cancellation_member_levels",
                json!(cases.iter().map(|c| c.1.level).collect::<Vec<_>>()),
            ),
    )
}

fn lp_suite(seed: u64) -> Result<Outcome> {
    let rep = estimate_piece_decay(&OmegaSpec::commutator(), -6..=6, 128, 20, seed)?;
    let up = rep.slope_nonnegative_j;
    let down = rep.slope_nonpositive_j;
    let passed = up.is_some_and(|s| s < 0.0) && down.is_some_and(|s| s > 0.0);
    let estimates: Vec<Value> = rep
        .estimates
        .iter()
        .map(|(j, run)| json!({ "j": j, "estimate": num(*run.last().unwrap_or(&0.0)) }))
        .collect();
    Ok(Outcome::new(passed)
        .metric("slope_nonnegative_j", up.map_or(Value::Null, num))
        .metric("slope_nonpositive_j", down.map_or(Value::Null, num))
        .metric("trials", json!(rep.trials))
        .metric("cells", json!(128))
        .metric("i_window", json!([rep.i_window.0, rep.i_window.1]))
        .metric("estimates", json!(estimates)))
}

fn weighted_suite(seed: u64) -> Result<Outcome> {
    let grid = line(32.0, 256);
    let support = GridRegion::interval(-16.0, 16.0)?;
    let omega = OmegaSpec::commutator();
    let windows = [TruncationWindow::new(-4, 4), TruncationWindow::new(-6, 6)];
    let q = [4.0, 4.0, 2.0];
    let kinds = [
        WeightedKind::Single {
            q: 4.0,
            w: Weight::power(grid, 0.5)?,
        },
        WeightedKind::Multilinear {
            p: [1.1, 1.3, 1.5],
            q,
            v: product_power_triple(grid, 0.3, -0.2, q)?,
        },
    ];
    let mut out = Outcome::new(true);
    for kind in &kinds {
        let maxes = windows
            .iter()
            .map(|w| {
                Ok(weighted_estimate_report(
                    &omega,
                    &ScalePartition,
                    kind,
                    &support,
                    20,
                    w,
                    seed,
                    DEFAULT_AP_CEILING,
                )?
                .batch_max)
            })
            .collect::<Result<Vec<f64>>>()?;
        let (lo, hi) = (maxes[0].min(maxes[1]), maxes[0].max(maxes[1]));
        let change = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        out.passed &= maxes.iter().all(|m| m.is_finite() && *m > 0.0) && change < 2.0;
        let label = kind.label();
        out = out
            .metric(&format!("{label}_batch_max_narrow"), num(maxes[0]))
            .metric(&format!("{label}_batch_max_wide"), num(maxes[1]))
            .metric(&format!("{label}_window_change_factor"), num(change));
    }

    let one = Weight::one(grid);
    let mut identical = true;
    for t in 0..5u64 {
        let (f, g) = weighted_inputs(grid, &support, derive_seed(seed, 100 + t))?;
        for p in [0.7, 1.0, 1.5, 2.0, 4.0] {
            let a = weighted_norm(&f, p, Some(&one))?;
            identical &= a.to_bits() == weighted_norm(&f, p, None)?.to_bits();
            if p >= 1.0 {
                identical &= a.to_bits() == lp_norm(&f, p, None)?.to_bits();
            }
        }
        let table = KernelTable::new(&omega, &ScalePartition, &grid, &windows[0]);
        let plain = WeightedKind::Single {
            q: 4.0,
            w: one.clone(),
        };
        let tv = apply_with_table(&table, &f, &g);
        let want = lp_norm(&tv, 2.0, None)? / (lp_norm(&f, 4.0, None)? * lp_norm(&g, 4.0, None)?);
        identical &= weighted_ratio(&table, &plain, &f, &g)?.to_bits() == want.to_bits();
    }
    out.passed &= identical;
    Ok(out.metric("unit_weight_bit_identical", json!(identical)))
}

fn dplerner_suite(seed: u64) -> Result<Outcome> {
    let grid = line(8.0, 128);
    let full = grid.full_region();
    let margins = (0..1000u64)
        .into_par_iter()
        .map(|c| {
            let cs = derive_seed(seed, c);
            let f = match c % 3 {
                0 => rough(grid, cs, &full)?.abs(),
                1 => bump(grid, cs, &full)?.abs(),
                _ => InputPreset::Spiky.generate(grid, &full, cs)?.abs(),
            };
            let a = pick(cs, 1, grid.cells());
            let b = a + 1 + pick(cs, 2, grid.cells() - a);
            let edge = |k: usize| -grid.half_width() + k as f64 * grid.step();
            let q = GridRegion::interval(edge(a), edge(b))?;
            let eps = 0.001 + 0.998 * unit(cs, 3);
            Ok(check_dplerner(&f, &q, eps)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let min = margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Outcome::new(min >= -1e-10)
        .metric("cases", json!(margins.len()))
        .metric("min_margin", num(min))
        .metric(
            "negative_margins",
            json!(margins.iter().filter(|m| **m < 0.0).count()),
        ))
}
