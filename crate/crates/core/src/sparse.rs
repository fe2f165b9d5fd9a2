//! Exceptional sets, the recursive stopping-time construction of a sparse
//! collection, positive sparse forms, and the domination experiments.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dyadic::{
    check_stopping_collection, maximal_cubes, sort_canonical, whitney_cover, CellSet, Cube,
    DilateMode, LatticeGrid, SparseCollection, StoppingCollection,
};
use crate::error::{domain, precondition, Result};
use crate::grid::{
    average_of_slice, check_exponent, derive_seed, random_test_function, SampleHeader,
    SampledFunction, Smoothness,
};
use crate::kernel::{
    check_support, trilinear_form, FormEvaluator, OmegaSpec, ScalePartition, TruncationWindow,
};
use crate::localnorms::{interval_maximal, x_norm, y_norm};

/// Dilation of the sparse cubes in [`domination_report`]; `f2, f3` live in `3Q0`.
pub const DOMINATION_DILATION: u32 = 3;

/// Default threshold for exceptional sets.
pub const DEFAULT_CD: f64 = 1024.0;

fn check_triple(lg: &LatticeGrid, fs: [&SampledFunction; 3], p: [f64; 3]) -> Result<()> {
    for &q in &p {
        check_exponent(q)?;
        if q.is_infinite() {
            return domain("sparse forms need finite exponents");
        }
    }
    if fs.iter().any(|f| f.grid() != lg.grid()) {
        return domain("functions do not live on the lattice grid");
    }
    Ok(())
}

/// `Σ_{Q ∈ S} |Q| Π_i (f_i)_{p_i, Q}`.
pub fn psf_eval(
    lg: &LatticeGrid,
    cubes: &[Cube],
    p: [f64; 3],
    fs: [&SampledFunction; 3],
) -> Result<f64> {
    psf_eval_dilated(lg, cubes, 1, p, fs)
}

/// The sparse form over the dilates `λQ`, `Σ_{Q ∈ S} |λQ| Π_i (f_i)_{p_i, λQ}`.
///
/// One-cell cubes dilate to themselves, as in the separation checks.
pub fn psf_eval_dilated(
    lg: &LatticeGrid,
    cubes: &[Cube],
    lambda: u32,
    p: [f64; 3],
    fs: [&SampledFunction; 3],
) -> Result<f64> {
    check_triple(lg, fs, p)?;
    let mut total = 0.0;
    for &q in cubes {
        let (a, b) = lg.dilate_cells(q, lambda);
        if a < 0 || b > lg.cells() as i64 {
            return domain(if lambda == 1 {
                format!("cube {q} is not inside the grid")
            } else {
                format!("dilate {lambda}{q} is not inside the grid")
            });
        }
        let span = a as usize..b as usize;
        let mut term = span.len() as f64 * lg.grid().step();
        for (f, &pi) in fs.iter().zip(&p) {
            term *= average_of_slice(&f.values()[span.clone()], pi);
        }
        total += term;
    }
    Ok(total)
}

/// Cells of `3Q` where `max_i M_{p_i}(f_i 1_{3Q}) / (f_i)_{p_i, 3Q} ≥ C_d`;
/// factors vanishing on `3Q` are left out.
pub fn exceptional_set(
    lg: &LatticeGrid,
    q: Cube,
    fs: [&SampledFunction; 3],
    p: [f64; 3],
    c_d: f64,
) -> Result<CellSet> {
    check_triple(lg, fs, p)?;
    if !(c_d > 0.0 && c_d.is_finite()) {
        return domain(format!("threshold must be positive and finite, got {c_d}"));
    }
    let (a, b) = lg.dilate_cells(q, 3);
    if a < 0 || b > lg.cells() as i64 {
        return domain(format!("3Q for {q} leaves the grid"));
    }
    Ok(exceptional_cells(lg, q, fs, p, c_d))
}

fn exceptional_cells(
    lg: &LatticeGrid,
    q: Cube,
    fs: [&SampledFunction; 3],
    p: [f64; 3],
    c_d: f64,
) -> CellSet {
    let span = lg.dilate_span(q, 3);
    let mut hit = vec![false; span.len()];
    for (f, &pi) in fs.iter().zip(&p) {
        let slice = &f.values()[span.clone()];
        let avg = average_of_slice(slice, pi);
        if avg == 0.0 {
            continue;
        }
        let level = c_d * avg;
        for (h, m) in hit.iter_mut().zip(interval_maximal(slice, pi)) {
            *h |= m >= level;
        }
    }
    let mut out = CellSet::empty(lg.cells());
    for (i, h) in hit.into_iter().enumerate() {
        if h {
            out.insert(span.start + i);
        }
    }
    out
}

/// Output of [`build_sparse`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseBuildResult {
    pub sparse: SparseCollection,
    /// `P(L)` for every cube that served as a top.
    pub stopping_tree: BTreeMap<Cube, StoppingCollection>,
    /// Cubes chosen at each generation, starting with `{Q0}`.
    pub generations: Vec<Vec<Cube>>,
    pub levels: usize,
    pub c_d: f64,
    /// Largest `|E_L| / |L|` over the tops of each generation.
    pub exceptional_ratio: Vec<f64>,
    /// Cubes chosen at some generation that lie in no `3L` of a current top.
    pub orphans: usize,
    /// Set when an iteration stopped shrinking the exceptional set.
    pub stalled: bool,
}

/// Recursive stopping-time construction from the lattice top `Q0`.
///
/// Each generation's tops `L` contribute `E_L`; their union `E` is covered by
/// the maximal cubes `R` with `9R ⊆ E` plus single cells, each top keeps
/// `P(L) = {R : R ⊆ 3L}`, and the cover becomes the next set of tops. A
/// cube's witness is the part of it left outside the next `E`.
pub fn build_sparse(
    lg: &LatticeGrid,
    fs: [&SampledFunction; 3],
    p: [f64; 3],
    c_d: f64,
) -> Result<SparseBuildResult> {
    check_triple(lg, fs, p)?;
    if !(c_d > 0.0 && c_d.is_finite()) {
        return domain(format!("threshold must be positive and finite, got {c_d}"));
    }
    let q0 = lg.top_cube();
    let (a, b) = lg.dilate_cells(q0, 3);
    if a < 0 || b > lg.cells() as i64 {
        return precondition(format!(
            "3Q0 for the top cube {q0} does not fit in the grid"
        ));
    }
    check_support(fs[0], lg.cube_cells(q0), "f1", "Q0")?;
    check_support(fs[1], (a, b), "f2", "3Q0")?;
    check_support(fs[2], (a, b), "f3", "3Q0")?;

    let n = lg.cells();
    let mut witnesses: BTreeMap<Cube, BTreeSet<usize>> = BTreeMap::new();
    let mut tree: BTreeMap<Cube, StoppingCollection> = BTreeMap::new();
    let mut generations = vec![vec![q0]];
    let mut ratios = Vec::new();
    let mut orphans = 0;
    let mut stalled = false;
    let mut tops = vec![q0];
    let mut previous: Option<CellSet> = None;
    let max_generations = (lg.lattice().s_max - lg.cell_level()) as usize + 2;

    loop {
        let parts: Vec<CellSet> = tops
            .par_iter()
            .map(|&l| exceptional_cells(lg, l, fs, p, c_d))
            .collect();
        let mut e = CellSet::empty(n);
        let mut worst: f64 = 0.0;
        for (l, part) in tops.iter().zip(&parts) {
            worst = worst.max(part.count() as f64 / lg.width(l.level) as f64);
            e.union_with(part);
        }
        ratios.push(worst);
        for &l in &tops {
            let w = witnesses.entry(l).or_default();
            w.extend(lg.cube_span(l).filter(|&k| !e.contains(k)));
        }
        if e.is_empty() {
            break;
        }
        if previous.as_ref() == Some(&e) || generations.len() >= max_generations {
            stalled = true;
            break;
        }
        let cover = whitney_cover(&e, lg);
        let mut claimed = vec![false; cover.len()];
        for &l in &tops {
            let (la, lb) = lg.dilate_cells(l, 3);
            let members: Vec<Cube> = cover
                .iter()
                .enumerate()
                .filter(|(_, &r)| {
                    let (ra, rb) = lg.cube_cells(r);
                    ra >= la && rb <= lb
                })
                .map(|(i, &r)| {
                    claimed[i] = true;
                    r
                })
                .collect();
            let entry = tree.entry(l).or_insert_with(|| StoppingCollection {
                top: l,
                members: Vec::new(),
            });
            for r in members {
                if !entry.members.contains(&r) {
                    entry.members.push(r);
                }
            }
            sort_canonical(&mut entry.members);
        }
        orphans += claimed.iter().filter(|c| !**c).count();
        generations.push(cover.clone());
        previous = Some(e);
        tops = cover;
    }

    let mut cubes: Vec<Cube> = witnesses.keys().copied().collect();
    sort_canonical(&mut cubes);
    let witnesses: BTreeMap<Cube, Vec<usize>> = witnesses
        .into_iter()
        .map(|(q, w)| (q, w.into_iter().collect()))
        .collect();
    let eta = cubes
        .iter()
        .map(|q| witnesses[q].len() as f64 / lg.width(q.level) as f64)
        .fold(1.0, f64::min);
    Ok(SparseBuildResult {
        sparse: SparseCollection {
            cubes,
            witnesses,
            eta,
        },
        stopping_tree: tree,
        levels: generations.len(),
        generations,
        c_d,
        exceptional_ratio: ratios,
        orphans,
        stalled,
    })
}

/// Every stopping collection of the tree that fails the verifier, with its
/// violations.
pub fn failing_collections(result: &SparseBuildResult, lg: &LatticeGrid) -> Vec<(Cube, usize)> {
    result
        .stopping_tree
        .values()
        .filter_map(|p| {
            let v = check_stopping_collection(p, lg, DilateMode::Resolved);
            (!v.is_empty()).then_some((p.top, v.len()))
        })
        .collect()
}

/// `|Λ| / PSF` for one triple, the form taken over the dilates `3Q`, `Q ∈ S`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominationReport {
    pub lambda: f64,
    pub psf: f64,
    pub ratio: f64,
    /// Dilation of the sparse cubes in the dominating form.
    pub dilation: u32,
    /// `PSF = 0` while `Λ ≠ 0`.
    pub anomaly: bool,
    pub exponents: [f64; 3],
    pub window: TruncationWindow,
    pub omega: String,
    pub c_d: f64,
    pub levels: usize,
    pub sparse_size: usize,
    pub measured_eta: f64,
    pub grid: SampleHeader,
}

#[allow(clippy::too_many_arguments)]
pub fn domination_report(
    omega: &OmegaSpec,
    partition: &ScalePartition,
    lg: &LatticeGrid,
    fs: [&SampledFunction; 3],
    p: [f64; 3],
    window: &TruncationWindow,
    c_d: f64,
) -> Result<DominationReport> {
    let mut v = domination_reports(
        omega,
        partition,
        lg,
        fs,
        p,
        std::slice::from_ref(window),
        c_d,
    )?;
    Ok(v.remove(0))
}

/// One report per window, sharing a single sparse build.
#[allow(clippy::too_many_arguments)]
pub fn domination_reports(
    omega: &OmegaSpec,
    partition: &ScalePartition,
    lg: &LatticeGrid,
    fs: [&SampledFunction; 3],
    p: [f64; 3],
    windows: &[TruncationWindow],
    c_d: f64,
) -> Result<Vec<DominationReport>> {
    for window in windows {
        if !window.is_empty() && window.top() >= lg.lattice().s_max {
            return precondition(format!(
                "window top scale {} must lie below the top cube scale {}",
                window.top(),
                lg.lattice().s_max
            ));
        }
    }
    let built = build_sparse(lg, fs, p, c_d)?;
    let psf = psf_eval_dilated(lg, &built.sparse.cubes, DOMINATION_DILATION, p, fs)?;
    windows
        .iter()
        .map(|window| {
            let lambda = trilinear_form(omega, partition, fs[0], fs[1], fs[2], window)?;
            let anomaly = psf == 0.0 && lambda != 0.0;
            let ratio = if psf == 0.0 {
                if anomaly {
                    f64::INFINITY
                } else {
                    0.0
                }
            } else {
                lambda.abs() / psf
            };
            Ok(DominationReport {
                lambda,
                psf,
                ratio,
                dilation: DOMINATION_DILATION,
                anomaly,
                exponents: p,
                window: *window,
                omega: omega.name().to_string(),
                c_d,
                levels: built.levels,
                sparse_size: built.sparse.cubes.len(),
                measured_eta: built.sparse.eta,
                grid: fs[0].header(),
            })
        })
        .collect()
}

/// Which argument of `Λ_P` carries the mean-zero part `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BPosition {
    First,
    Second,
    Third,
}

impl BPosition {
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Self::First),
            2 => Ok(Self::Second),
            3 => Ok(Self::Third),
            _ => domain(format!("b position must be 1, 2 or 3, got {i}")),
        }
    }

    pub fn index(self) -> usize {
        match self {
            Self::First => 0,
            Self::Second => 1,
            Self::Third => 2,
        }
    }
}

/// `|Λ_P(.., b, ..)| / (|Q| ‖b‖_X Π ‖g‖_Y)`, or `None` when the denominator
/// vanishes.
#[allow(clippy::too_many_arguments)]
pub fn assumption_l_ratio(
    evaluator: &mut FormEvaluator<'_>,
    lg: &LatticeGrid,
    p_coll: &StoppingCollection,
    b: &BTreeMap<Cube, SampledFunction>,
    gs: [&SampledFunction; 2],
    p: [f64; 3],
    position: BPosition,
) -> Result<Option<f64>> {
    let pos = position.index();
    let bx = x_norm(b, p_coll, lg, p[pos], true)?;
    let mut b_sum = SampledFunction::zeros(*lg.grid());
    for f in b.values() {
        b_sum = b_sum.combine(1.0, f, 1.0)?;
    }
    let mut args: Vec<&SampledFunction> = gs.to_vec();
    args.insert(pos, &b_sum);
    let mut denom = lg.measure(p_coll.top) * bx;
    let mut gi = 0;
    for (i, &pi) in p.iter().enumerate() {
        if i != pos {
            denom *= y_norm(gs[gi], p_coll, lg, pi)?;
            gi += 1;
        }
    }
    let lam = evaluator.lambda_p(lg, p_coll, args[0], args[1], args[2])?;
    if denom == 0.0 {
        return Ok(None);
    }
    Ok(Some(lam.abs() / denom))
}

/// Batch maximum of [`assumption_l_ratio`] over seeded inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionLReport {
    pub max_ratio: f64,
    pub ratios: Vec<Option<f64>>,
    pub skipped: usize,
    pub position: BPosition,
    pub exponents: [f64; 3],
    pub window: TruncationWindow,
    pub seed: u64,
}

/// A seeded stopping collection with top `Q0`: the maximal cubes with
/// `9R ⊆ E` for a random union `E` of lattice cubes of level `s_min`, kept
/// only once it passes the verifier.
pub fn random_stopping_collection(lg: &LatticeGrid, seed: u64) -> StoppingCollection {
    let q0 = lg.top_cube();
    let lat = lg.lattice();
    let unit = lg.width(lat.s_min);
    let (a, b) = lg.dilate_cells(q0, 3);
    let blocks = (b - a) / unit;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..64u64 {
        let mut e = CellSet::empty(lg.cells());
        for _ in 0..rng.gen_range(1..=3) {
            let len = rng.gen_range(1..=blocks / 2);
            let start = rng.gen_range(0..=blocks - len);
            let lo = a + start * unit;
            e.insert_range(lo as usize..(lo + len * unit) as usize);
        }
        let members: Vec<Cube> = maximal_cubes(&e, lg, 9)
            .into_iter()
            .filter(|&r| {
                let (ra, rb) = lg.cube_cells(r);
                ra >= a && rb <= b
            })
            .collect();
        let coll = StoppingCollection { top: q0, members };
        if check_stopping_collection(&coll, lg, DilateMode::Resolved).is_empty() || attempt == 63 {
            return coll;
        }
    }
    unreachable!()
}

/// Empirical lower bound for the constant of the localized-form assumption.
#[allow(clippy::too_many_arguments)]
pub fn assumption_l_report(
    omega: &OmegaSpec,
    partition: &ScalePartition,
    lg: &LatticeGrid,
    window: &TruncationWindow,
    p: [f64; 3],
    position: BPosition,
    trials: usize,
    seed: u64,
) -> Result<AssumptionLReport> {
    let grid = *lg.grid();
    let q0 = lg.top_cube();
    let top = lg.lattice().region(q0);
    let side = top.upper()[0] - top.lower()[0];
    let three = crate::grid::GridRegion::interval(top.lower()[0] - side, top.upper()[0] + side)?;
    let mut evaluator = FormEvaluator::new(omega, partition, grid, *window);
    let mut ratios = Vec::with_capacity(trials);
    for t in 0..trials as u64 {
        let ts = derive_seed(seed, t);
        let coll = random_stopping_collection(lg, derive_seed(ts, 0));
        let mut b = BTreeMap::new();
        for (i, &l) in coll.members.iter().enumerate() {
            if position == BPosition::First && !q0.contains(&l) {
                continue;
            }
            let raw = random_test_function(
                grid,
                derive_seed(ts, 100 + i as u64),
                Smoothness::BumpSum,
                &lg.lattice().region(l),
                1.0,
            )?;
            let span = lg.cube_span(l);
            let slice = &raw.values()[span.clone()];
            let mean = slice.iter().sum::<f64>() / slice.len() as f64;
            let vals: Vec<f64> = (0..grid.cells())
                .map(|k| {
                    if span.contains(&k) {
                        raw.values()[k] - mean
                    } else {
                        0.0
                    }
                })
                .collect();
            b.insert(l, SampledFunction::new(grid, vals)?);
        }
        let g = |k: u64, first: bool| {
            let region = if first { top.clone() } else { three.clone() };
            random_test_function(grid, derive_seed(ts, k), Smoothness::BumpSum, &region, 1.0)
        };
        // the first g fills the f1 slot unless b does
        let ga = g(1, position != BPosition::First)?;
        let gb = g(2, false)?;
        let r = assumption_l_ratio(&mut evaluator, lg, &coll, &b, [&ga, &gb], p, position)?;
        ratios.push(r);
    }
    let skipped = ratios.iter().filter(|r| r.is_none()).count();
    let max_ratio = ratios.iter().flatten().fold(0.0, |m: f64, &r| m.max(r));
    Ok(AssumptionLReport {
        max_ratio,
        ratios,
        skipped,
        position,
        exponents: p,
        window: *window,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::{check_sparsity, DyadicLattice};
    use crate::grid::{Grid, GridRegion};

    fn lattice(cells: usize) -> LatticeGrid {
        LatticeGrid::new(
            Grid::line(16.0, cells).unwrap(),
            DyadicLattice::new(0.0, -3, 3).unwrap(),
        )
        .unwrap()
    }

    fn random_triple(lg: &LatticeGrid, seed: u64) -> [SampledFunction; 3] {
        let g = *lg.grid();
        let q0 = lg.lattice().region(lg.top_cube());
        let three = GridRegion::interval(-8.0, 16.0).unwrap();
        let kind = |k: u64| {
            if (seed + k).is_multiple_of(2) {
                Smoothness::RoughIndicator
            } else {
                Smoothness::BumpSum
            }
        };
        [
            random_test_function(g, derive_seed(seed, 1), kind(1), &q0, 1.0).unwrap(),
            random_test_function(g, derive_seed(seed, 2), kind(2), &three, 1.0).unwrap(),
            random_test_function(g, derive_seed(seed, 3), kind(3), &three, 1.0).unwrap(),
        ]
    }

    fn brute_average(v: &[f64], p: f64) -> f64 {
        let mut s = 0.0;
        for x in v {
            s += x.abs().powf(p);
        }
        (s / v.len() as f64).powf(1.0 / p)
    }

    #[test]
    fn psf_examples() {
        let lg = lattice(256);
        let g = *lg.grid();
        let one = SampledFunction::constant(g, 1.0);
        let cubes = [Cube::new(1, 0), Cube::new(0, 3), Cube::new(-2, -5)];
        let total = psf_eval(&lg, &cubes, [1.5, 2.0, 1.1], [&one, &one, &one]).unwrap();
        assert!((total - (2.0 + 1.0 + 0.25)).abs() < 1e-12);

        let [f1, f2, f3] = random_triple(&lg, 4);
        let q = [Cube::new(2, 0)];
        let single = psf_eval(&lg, &q, [1.0, 2.0, 3.0], [&f1, &f2, &f3]).unwrap();
        let span = lg.cube_span(q[0]);
        let want = 4.0
            * brute_average(&f1.values()[span.clone()], 1.0)
            * brute_average(&f2.values()[span.clone()], 2.0)
            * brute_average(&f3.values()[span], 3.0);
        assert!((single - want).abs() <= 1e-12 * want);
        assert!(psf_eval(&lg, &q, [0.5, 1.0, 1.0], [&f1, &f2, &f3]).is_err());

        let same = psf_eval_dilated(&lg, &q, 1, [1.0, 2.0, 3.0], [&f1, &f2, &f3]).unwrap();
        assert_eq!(same.to_bits(), single.to_bits());
        // one-cell cubes keep their own cell
        let cubes = [Cube::new(1, 0), Cube::new(-3, 0)];
        let total = psf_eval_dilated(&lg, &cubes, 3, [1.5, 2.0, 1.1], [&one, &one, &one]).unwrap();
        assert!((total - (6.0 + 0.125)).abs() < 1e-12);
        let err =
            psf_eval_dilated(&lg, &[Cube::new(3, 1)], 3, [1.0; 3], [&one, &one, &one]).unwrap_err();
        assert!(err.to_string().contains("dilate"));
    }

    #[test]
    fn psf_matches_resummation() {
        let lg = lattice(256);
        for seed in 0..10 {
            let fs = random_triple(&lg, seed);
            let built = build_sparse(&lg, [&fs[0], &fs[1], &fs[2]], [1.1, 1.3, 2.0], 4.0).unwrap();
            let got = psf_eval(
                &lg,
                &built.sparse.cubes,
                [1.1, 1.3, 2.0],
                [&fs[0], &fs[1], &fs[2]],
            )
            .unwrap();
            let mut want = 0.0;
            for q in &built.sparse.cubes {
                let (a, b) = lg.cube_cells(*q);
                let mut term = (b - a) as f64 * lg.grid().step();
                for (f, p) in fs.iter().zip([1.1, 1.3, 2.0]) {
                    term *= brute_average(&f.values()[a as usize..b as usize], p);
                }
                want += term;
            }
            assert!((got - want).abs() <= 1e-12 * want.max(1e-300));
        }
    }

    fn brute_exceptional(
        lg: &LatticeGrid,
        q: Cube,
        fs: [&SampledFunction; 3],
        p: [f64; 3],
        c_d: f64,
    ) -> Vec<usize> {
        let span = lg.dilate_span(q, 3);
        let mut out = Vec::new();
        for x in span.clone() {
            let mut worst: f64 = 0.0;
            for (f, &pi) in fs.iter().zip(&p) {
                let v = &f.values()[span.clone()];
                let avg = brute_average(v, pi);
                if avg == 0.0 {
                    continue;
                }
                let mut best: f64 = 0.0;
                for i in span.start..=x {
                    let mut s = 0.0;
                    for k in i..span.end {
                        s += f.values()[k].abs().powf(pi);
                        if k >= x {
                            best = best.max((s / (k + 1 - i) as f64).powf(1.0 / pi));
                        }
                    }
                }
                worst = worst.max(best / avg);
            }
            if worst >= c_d {
                out.push(x);
            }
        }
        out
    }

    #[test]
    fn exceptional_set_examples() {
        let lg = lattice(256);
        let g = *lg.grid();
        let q = Cube::new(1, 1);
        let span = lg.dilate_span(q, 3);
        let ind = SampledFunction::new(
            g,
            (0..256)
                .map(|k| f64::from(u8::from(span.contains(&k))))
                .collect(),
        )
        .unwrap();
        let one = SampledFunction::constant(g, 1.0);
        let e = exceptional_set(&lg, q, [&ind, &one, &one], [1.0, 1.0, 1.0], 1.0).unwrap();
        assert_eq!(e.indices(), span.clone().collect::<Vec<_>>());
        let e = exceptional_set(&lg, q, [&ind, &one, &one], [1.0, 1.0, 1.0], 1e300).unwrap();
        assert!(e.is_empty());
        let zero = SampledFunction::zeros(g);
        assert!(
            exceptional_set(&lg, q, [&zero, &zero, &zero], [1.0, 2.0, 3.0], 1.0)
                .unwrap()
                .is_empty()
        );

        for seed in 0..6 {
            let fs = random_triple(&lg, seed);
            let fs = [&fs[0], &fs[1], &fs[2]];
            for (q, c) in [
                (Cube::new(3, 0), 1.5),
                (Cube::new(1, 2), 1.2),
                (Cube::new(0, 5), 2.0),
            ] {
                let got = exceptional_set(&lg, q, fs, [1.1, 1.5, 2.0], c)
                    .unwrap()
                    .indices();
                assert_eq!(got, brute_exceptional(&lg, q, fs, [1.1, 1.5, 2.0], c));
            }
            let e = exceptional_set(&lg, Cube::new(3, 0), fs, [1.1, 1.1, 1.1], 1024.0).unwrap();
            assert!(e.count() * 2 <= lg.width(3) as usize);
        }
    }

    #[test]
    fn constant_inputs_stop_at_top() {
        let lg = lattice(256);
        let g = *lg.grid();
        let f1 = SampledFunction::new(
            g,
            (0..256)
                .map(|k| f64::from(u8::from(lg.cube_span(lg.top_cube()).contains(&k))))
                .collect(),
        )
        .unwrap();
        let three = lg.dilate_span(lg.top_cube(), 3);
        let f2 = SampledFunction::new(
            g,
            (0..256)
                .map(|k| f64::from(u8::from(three.contains(&k))))
                .collect(),
        )
        .unwrap();
        let r = build_sparse(&lg, [&f1, &f2, &f2], [1.1, 1.1, 1.1], 1024.0).unwrap();
        assert_eq!(r.sparse.cubes, vec![lg.top_cube()]);
        assert_eq!(r.levels, 1);
        assert_eq!(r.exceptional_ratio, vec![0.0]);
        assert_eq!(
            r.sparse.witnesses[&lg.top_cube()].len(),
            lg.width(3) as usize
        );
    }

    #[test]
    fn spike_forces_deeper_cubes() {
        let lg = lattice(256);
        let g = *lg.grid();
        let q0 = lg.cube_span(lg.top_cube());
        let spike = q0.start + 21;
        let f1 = SampledFunction::new(
            g,
            (0..256)
                .map(|k| {
                    if k == spike {
                        1e6
                    } else if q0.contains(&k) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        )
        .unwrap();
        let one = SampledFunction::constant(g, 1.0).restricted(lg.dilate_span(lg.top_cube(), 3));
        let r = build_sparse(&lg, [&f1, &one, &one], [1.1, 1.1, 1.1], 16.0).unwrap();
        assert!(r.levels >= 2);
        assert!(r.generations[1..]
            .iter()
            .flatten()
            .any(|q| lg.cube_span(*q).contains(&spike)));
        check_tree(&lg, &r);
    }

    fn check_tree(lg: &LatticeGrid, r: &SparseBuildResult) {
        assert!(
            failing_collections(r, lg).is_empty(),
            "{:?}",
            failing_collections(r, lg)
        );
        for p in r.stopping_tree.values() {
            let (a, b) = lg.dilate_cells(p.top, 3);
            for m in &p.members {
                let (ma, mb) = lg.cube_cells(*m);
                assert!(a <= ma && mb <= b);
            }
        }
        let report = check_sparsity(&r.sparse, lg);
        assert!(report.valid, "{:?}", report.problems);
        let lat = lg.lattice();
        assert!(r.levels as i32 <= lat.s_max - lg.cell_level() + 1);
        assert!(!r.stalled);
    }

    #[test]
    fn random_builds_are_sparse() {
        let lg = lattice(256);
        for seed in 0..12 {
            let fs = random_triple(&lg, seed);
            let r =
                build_sparse(&lg, [&fs[0], &fs[1], &fs[2]], [1.1, 1.1, 1.1], DEFAULT_CD).unwrap();
            check_tree(&lg, &r);
            assert!(r.sparse.eta >= 0.5);
            assert!(r.exceptional_ratio.iter().all(|&x| x <= 0.5));
            let r = build_sparse(&lg, [&fs[0], &fs[1], &fs[2]], [1.5, 1.1, 2.0], 3.0).unwrap();
            check_tree(&lg, &r);
        }
    }

    #[test]
    fn build_preconditions() {
        let lg = lattice(256);
        let g = *lg.grid();
        let [f1, f2, f3] = random_triple(&lg, 1);
        let err = build_sparse(&lg, [&f2, &f2, &f3], [1.1, 1.1, 1.1], 4.0).unwrap_err();
        assert!(err.to_string().contains("f1"));
        let wide = SampledFunction::constant(g, 1.0);
        let err = build_sparse(&lg, [&f1, &f2, &wide], [1.1, 1.1, 1.1], 4.0).unwrap_err();
        assert!(err.to_string().contains("f3"));
    }

    #[test]
    fn domination_trivial_cases() {
        let lg = lattice(256);
        let g = *lg.grid();
        let [f1, f2, f3] = random_triple(&lg, 9);
        let zero = SampledFunction::zeros(g);
        let om = OmegaSpec::commutator();
        let w = TruncationWindow::new(-3, 2);
        let r = domination_report(
            &om,
            &ScalePartition,
            &lg,
            [&f1, &zero, &f3],
            [1.1; 3],
            &w,
            1024.0,
        )
        .unwrap();
        assert_eq!((r.lambda, r.ratio, r.anomaly), (0.0, 0.0, false));
        let r = domination_report(
            &OmegaSpec::zero(),
            &ScalePartition,
            &lg,
            [&f1, &f2, &f3],
            [1.1; 3],
            &w,
            1024.0,
        )
        .unwrap();
        assert_eq!(r.ratio, 0.0);
        let r = domination_report(
            &om,
            &ScalePartition,
            &lg,
            [&f1, &f2, &f3],
            [1.1; 3],
            &w,
            1024.0,
        )
        .unwrap();
        assert!(r.ratio.is_finite() && r.psf > 0.0 && !r.anomaly);
        assert!(domination_report(
            &om,
            &ScalePartition,
            &lg,
            [&f1, &f2, &f3],
            [1.1; 3],
            &TruncationWindow::new(-3, 5),
            1024.0
        )
        .is_err());

        let windows = [TruncationWindow::new(-3, 2), w];
        let many = domination_reports(
            &om,
            &ScalePartition,
            &lg,
            [&f1, &f2, &f3],
            [1.1; 3],
            &windows,
            1024.0,
        )
        .unwrap();
        assert_eq!(many[1], r);
        assert_eq!(many[0].psf.to_bits(), r.psf.to_bits());
        assert_eq!(many[0].window, windows[0]);
    }

    #[test]
    fn assumption_l_cases() {
        let lg = lattice(256);
        let g = *lg.grid();
        let om = OmegaSpec::commutator();
        let w = TruncationWindow::new(-3, 3);
        let coll = random_stopping_collection(&lg, 5);
        assert!(check_stopping_collection(&coll, &lg, DilateMode::Resolved).is_empty());
        let zero = SampledFunction::zeros(g);
        let [f1, _, f3] = random_triple(&lg, 2);
        let mut ev = FormEvaluator::new(&om, &ScalePartition, g, w);
        let none = BTreeMap::new();
        assert_eq!(
            assumption_l_ratio(
                &mut ev,
                &lg,
                &coll,
                &none,
                [&f1, &f3],
                [1.1; 3],
                BPosition::Second
            )
            .unwrap(),
            None
        );
        let mut b = BTreeMap::new();
        for &l in &coll.members {
            let span = lg.cube_span(l);
            let mid = (span.start + span.end) / 2;
            let v = (0..256)
                .map(|k| {
                    if span.contains(&k) && span.len() > 1 {
                        if k < mid {
                            1.0
                        } else {
                            -1.0
                        }
                    } else {
                        0.0
                    }
                })
                .collect();
            b.insert(l, SampledFunction::new(g, v).unwrap());
        }
        if !b.is_empty() {
            let r = assumption_l_ratio(
                &mut ev,
                &lg,
                &coll,
                &b,
                [&zero, &f3],
                [1.1; 3],
                BPosition::Second,
            )
            .unwrap();
            assert!(r.is_none() || r == Some(0.0));
        }
        for pos in [BPosition::First, BPosition::Second, BPosition::Third] {
            let rep =
                assumption_l_report(&om, &ScalePartition, &lg, &w, [1.1, 1.5, 2.0], pos, 4, 11)
                    .unwrap();
            assert!(rep.max_ratio.is_finite());
            assert_eq!(rep.ratios.len(), 4);
        }
    }
}
