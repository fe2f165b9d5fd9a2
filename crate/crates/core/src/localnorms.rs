//! Maximal functions, the stopping-collection norms `Y_p` and `X_p`, the
//! Calderón–Zygmund decomposition relative to a stopping collection, and the
//! Di Plinio–Lerner average inequality.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::dyadic::{Cube, LatticeGrid, StoppingCollection};
use crate::error::{domain, precondition, Result};
use crate::grid::{check_exponent, lp_average, pow_abs, GridRegion, SampledFunction};

/// Cubes over which maximal functions take their supremum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CubeFamily {
    /// Every interval made of whole grid cells.
    AllIntervals,
    /// Only the lattice cubes inside the grid.
    Dyadic(LatticeGrid),
}

impl CubeFamily {
    pub fn describe(&self) -> &'static str {
        match self {
            CubeFamily::AllIntervals => "all-cell-aligned-intervals",
            CubeFamily::Dyadic(_) => "dyadic-lattice-cubes",
        }
    }
}

/// `M_p f(x) = sup over family cubes Q containing x of (f)_{p,Q}`.
pub fn maximal_function(
    f: &SampledFunction,
    p: f64,
    family: &CubeFamily,
) -> Result<SampledFunction> {
    check_exponent(p)?;
    if f.grid().dim() != 1 {
        return domain("maximal functions are computed on one-dimensional grids");
    }
    let values = match family {
        CubeFamily::AllIntervals => interval_maximal(f.values(), p),
        CubeFamily::Dyadic(lg) => dyadic_maximal(f.values(), p, lg),
    };
    SampledFunction::new(*f.grid(), values)
}

/// Maximal function over every sub-interval of `values`, `O(n^2)`.
///
/// For each left end `a`, the interval means `m(a, b)` are accumulated left to
/// right, then a right-to-left running maximum gives the best interval starting
/// at `a` that contains each `b`.
pub(crate) fn interval_maximal(values: &[f64], p: f64) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    if p.is_infinite() {
        let m = values.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
        return vec![m; n];
    }
    let powered: Vec<f64> = values.iter().map(|&v| pow_abs(v, p)).collect();
    let chunk = (n / (4 * rayon::current_num_threads()).max(1)).max(16);
    let best = (0..n)
        .into_par_iter()
        .with_min_len(chunk)
        .fold(
            || (vec![0.0f64; n], vec![0.0f64; n]),
            |(mut best, mut means), a| {
                let mut sum = 0.0;
                for b in a..n {
                    sum += powered[b];
                    means[b] = sum / (b - a + 1) as f64;
                }
                let mut run = 0.0f64;
                for b in (a..n).rev() {
                    run = run.max(means[b]);
                    best[b] = best[b].max(run);
                }
                (best, means)
            },
        )
        .map(|(best, _)| best)
        .reduce(
            || vec![0.0f64; n],
            |mut x, y| {
                for (u, v) in x.iter_mut().zip(y) {
                    *u = u.max(v);
                }
                x
            },
        );
    best.into_iter().map(|m| root(m, p)).collect()
}

fn root(m: f64, p: f64) -> f64 {
    if p == 1.0 {
        m
    } else if p == 2.0 {
        m.sqrt()
    } else {
        m.powf(1.0 / p)
    }
}

fn dyadic_maximal(values: &[f64], p: f64, lg: &LatticeGrid) -> Vec<f64> {
    let n = values.len();
    let mut best = vec![0.0f64; n];
    let lat = lg.lattice();
    for level in lat.s_min..=lat.s_max {
        let mut k = 0;
        while k < n {
            let q = lg.cube_of_cell(k, level);
            let span = lg.cube_span(q);
            if lg.in_grid(q) {
                let m = mean_power(&values[span.clone()], p);
                for b in &mut best[span.clone()] {
                    *b = b.max(m);
                }
            }
            k = span.end;
        }
    }
    best.into_iter()
        .map(|m| if p.is_infinite() { m } else { root(m, p) })
        .collect()
}

/// Mean of `|v|^p` (or the max of `|v|` for `p = inf`).
fn mean_power(values: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        return values.iter().fold(0.0, |m, v| m.max(v.abs()));
    }
    values.iter().map(|&v| pow_abs(v, p)).sum::<f64>() / values.len() as f64
}

/// The `Y_p(P)` norm; `p = inf` gives the sup norm.
///
/// The infimum over `L^ = 32 L` runs over cells whose centers lie in `L^`
/// clipped to the grid.
pub fn y_norm(
    h: &SampledFunction,
    p_coll: &StoppingCollection,
    lg: &LatticeGrid,
    p: f64,
) -> Result<f64> {
    check_exponent(p)?;
    if p.is_infinite() {
        return Ok(h.sup_norm());
    }
    let n = lg.cells();
    let mut inside = vec![false; n];
    for &l in &p_coll.members {
        for k in lg.cube_span(l) {
            inside[k] = true;
        }
    }
    let outside = h
        .values()
        .iter()
        .zip(&inside)
        .filter(|(_, &i)| !i)
        .fold(0.0, |m: f64, (v, _)| m.max(v.abs()));
    if p_coll.members.is_empty() {
        return Ok(outside);
    }
    let mp = interval_maximal(h.values(), p);
    let inner = p_coll
        .members
        .iter()
        .map(|&l| {
            mp[lg.dilate_span(l, 32)]
                .iter()
                .fold(f64::INFINITY, |m: f64, &v| m.min(v))
        })
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    Ok(outside.max(inner))
}

fn mean_zero_tolerance(lg: &LatticeGrid, l: Cube, scale: f64) -> f64 {
    1e-8 * lg.measure(l) * scale
}

/// `Y_p` norm of `sum b_L`, each `b_L` supported in its cube `L`.
pub fn x_norm(
    b: &BTreeMap<Cube, SampledFunction>,
    p_coll: &StoppingCollection,
    lg: &LatticeGrid,
    p: f64,
    require_mean_zero: bool,
) -> Result<f64> {
    let mut total = SampledFunction::zeros(*lg.grid());
    let scale = b.values().fold(0.0, |m: f64, f| m.max(f.sup_norm()));
    for (&l, bl) in b {
        let span = lg.cube_span(l);
        if let Some(s) = bl.support_span() {
            if s.start < span.start || s.end > span.end {
                return precondition(format!("b_L for cube {l} is not supported in the cube"));
            }
        }
        if require_mean_zero {
            let mean: f64 = bl.values()[span].iter().sum::<f64>() * lg.grid().step();
            if mean.abs() > mean_zero_tolerance(lg, l, scale) {
                return precondition(format!("b_L for cube {l} has integral {mean}, not zero"));
            }
        }
        total = total.combine(1.0, bl, 1.0)?;
    }
    y_norm(&total, p_coll, lg, p)
}

/// Good and bad parts `h = g + sum b_L`.
#[derive(Clone, Debug, PartialEq)]
pub struct CzPair {
    pub good: SampledFunction,
    pub bad: BTreeMap<Cube, SampledFunction>,
}

impl CzPair {
    pub fn bad_sum(&self) -> SampledFunction {
        let mut values = vec![0.0; self.good.values().len()];
        for b in self.bad.values() {
            for (u, v) in values.iter_mut().zip(b.values()) {
                *u += v;
            }
        }
        SampledFunction::new(*self.good.grid(), values).expect("finite sums of finite samples")
    }
}

/// Largest power of two dividing every sample of the slice.
fn common_quantum(values: &[f64]) -> Option<i32> {
    values
        .iter()
        .filter(|v| **v != 0.0)
        .map(|&v| {
            let bits = v.to_bits();
            let exp = ((bits >> 52) & 0x7ff) as i32;
            let frac = bits & ((1u64 << 52) - 1);
            let (mant, e) = if exp == 0 {
                (frac, -1074)
            } else {
                (frac | (1u64 << 52), exp - 1075)
            };
            e + mant.trailing_zeros() as i32
        })
        .min()
}

/// Cube average rounded to a power-of-two grid fine enough that `h - avg` is
/// exact for every sample and the rounding is far below the mean-zero
/// tolerance.
fn exact_average(values: &[f64]) -> f64 {
    let Some(fine) = common_quantum(values) else {
        return 0.0;
    };
    let peak = values.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    let coarse = peak.log2().floor() as i32 - 40;
    let q = 2f64.powi(fine.min(coarse));
    let avg = values.iter().sum::<f64>() / values.len() as f64;
    (avg / q).round() * q
}

/// Calderón–Zygmund decomposition of `h` relative to the members of `P`.
pub fn cz_decompose(
    h: &SampledFunction,
    p_coll: &StoppingCollection,
    lg: &LatticeGrid,
) -> Result<CzPair> {
    let n = lg.cells();
    let mut owner: Vec<Option<Cube>> = vec![None; n];
    for &l in &p_coll.members {
        if !lg.in_grid(l) {
            return precondition(format!("member cube {l} extends outside the grid"));
        }
        for k in lg.cube_span(l) {
            if let Some(other) = owner[k] {
                return precondition(format!("member cubes {other} and {l} overlap"));
            }
            owner[k] = Some(l);
        }
    }
    let mut good = h.values().to_vec();
    let mut bad = BTreeMap::new();
    for &l in &p_coll.members {
        let span = lg.cube_span(l);
        let g = exact_average(&h.values()[span.clone()]);
        let mut b = vec![0.0; n];
        for k in span {
            b[k] = h.values()[k] - g;
            good[k] = g;
        }
        bad.insert(l, SampledFunction::new(*h.grid(), b)?);
    }
    Ok(CzPair {
        good: SampledFunction::new(*h.grid(), good)?,
        bad,
    })
}

/// `(f)_{1,Q} + 2 eps (M_{1+eps} f)_{1,Q} - (f)_{1+eps,Q}` in one dimension.
pub fn check_dplerner(f: &SampledFunction, q: &GridRegion, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return domain(format!("epsilon must lie in (0, 1), got {eps}"));
    }
    if f.values().iter().any(|&v| v < 0.0) {
        return domain("the Di Plinio-Lerner check takes a nonnegative function");
    }
    let m = maximal_function(f, 1.0 + eps, &CubeFamily::AllIntervals)?;
    let lhs = lp_average(f, 1.0 + eps, q)?;
    let rhs = lp_average(f, 1.0, q)? + 2.0 * eps * lp_average(&m, 1.0, q)?;
    Ok(rhs - lhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::DyadicLattice;
    use crate::grid::{random_test_function, Grid, Smoothness};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct sup over every cell-aligned interval containing cell `x`.
    fn brute_maximal_at(values: &[f64], p: f64, x: usize) -> f64 {
        let mut best: f64 = 0.0;
        for a in 0..=x {
            let mut s: f64 = values[a..x].iter().map(|v| v.abs().powf(p)).sum();
            for b in x..values.len() {
                s += values[b].abs().powf(p);
                best = best.max(s / (b - a + 1) as f64);
            }
        }
        best.powf(1.0 / p)
    }

    fn setup() -> LatticeGrid {
        let grid = Grid::line(8.0, 512).unwrap();
        LatticeGrid::new(grid, DyadicLattice::new(0.0, -5, 3).unwrap()).unwrap()
    }

    #[test]
    fn maximal_of_constant() {
        let grid = Grid::line(1.0, 64).unwrap();
        let f = SampledFunction::constant(grid, 1.0);
        for p in [1.0, 2.5, f64::INFINITY] {
            let m = maximal_function(&f, p, &CubeFamily::AllIntervals).unwrap();
            assert!(m.values().iter().all(|&v| (v - 1.0).abs() < 1e-14));
        }
        assert!(maximal_function(&f, 0.9, &CubeFamily::AllIntervals).is_err());
    }

    #[test]
    fn maximal_of_indicator_at_two() {
        let grid = Grid::line(4.0, 256).unwrap();
        let f = SampledFunction::from_fn_1d(grid, |x| f64::from(u8::from((0.0..1.0).contains(&x))))
            .unwrap();
        let x = grid.clipped_span(2.0, 2.0 + grid.step()).start;
        let h = grid.step();
        for (p, expect) in [(1.0, 0.5), (2.0, 0.5f64.sqrt())] {
            let m = maximal_function(&f, p, &CubeFamily::AllIntervals).unwrap();
            assert!(
                (m.values()[x] - expect).abs() <= h,
                "p={p}: {}",
                m.values()[x]
            );
            let oracle = brute_maximal_at(f.values(), p, x);
            assert!((m.values()[x] - oracle).abs() <= 1e-12 * oracle);
        }
    }

    #[test]
    fn maximal_dominates_own_cell_and_grows_with_p() {
        let grid = Grid::line(2.0, 128).unwrap();
        let f = random_test_function(
            grid,
            5,
            Smoothness::RoughIndicator,
            &grid.full_region(),
            3.0,
        )
        .unwrap();
        let lg = LatticeGrid::new(grid, DyadicLattice::new(0.0, -5, 1).unwrap()).unwrap();
        let mut prev = vec![0.0; 128];
        for p in [1.0, 1.5, 2.0, 4.0] {
            let m = maximal_function(&f, p, &CubeFamily::AllIntervals).unwrap();
            let d = maximal_function(&f, p, &CubeFamily::Dyadic(lg)).unwrap();
            for k in 0..128 {
                assert!(m.values()[k] + 1e-12 >= f.values()[k].abs());
                assert!(m.values()[k] >= prev[k] - 1e-10);
                assert!(d.values()[k] <= m.values()[k] * (1.0 + 1e-12));
            }
            prev = m.values().to_vec();
        }
    }

    #[test]
    fn y_norm_branches() {
        let lg = setup();
        let grid = *lg.grid();
        let h = random_test_function(
            grid,
            2,
            Smoothness::BumpSum,
            &GridRegion::interval(-3.0, 3.0).unwrap(),
            1.0,
        )
        .unwrap();
        let empty = StoppingCollection {
            top: Cube::new(1, 0),
            members: vec![],
        };
        assert_eq!(y_norm(&h, &empty, &lg, 2.0).unwrap(), h.sup_norm());
        let one = StoppingCollection {
            top: Cube::new(1, 0),
            members: vec![Cube::new(-2, 3)],
        };
        assert_eq!(y_norm(&h, &one, &lg, f64::INFINITY).unwrap(), h.sup_norm());

        // h supported inside the single member
        let l = Cube::new(-2, 3);
        let inside = h.restricted(lg.cube_span(l));
        let got = y_norm(&inside, &one, &lg, 1.5).unwrap();
        let hat = lg.dilate_span(l, 32);
        let oracle = hat
            .map(|x| brute_maximal_at(inside.values(), 1.5, x))
            .fold(f64::INFINITY, f64::min);
        assert!((got - oracle).abs() <= 1e-12 * oracle);
    }

    #[test]
    fn x_norm_examples() {
        let lg = setup();
        let grid = *lg.grid();
        let l = Cube::new(-1, 2);
        let p_coll = StoppingCollection {
            top: Cube::new(1, 0),
            members: vec![l],
        };
        let zero: BTreeMap<Cube, SampledFunction> =
            [(l, SampledFunction::zeros(grid))].into_iter().collect();
        assert_eq!(x_norm(&zero, &p_coll, &lg, 2.0, true).unwrap(), 0.0);

        let span = lg.cube_span(l);
        let mid = (span.start + span.end) / 2;
        let vals: Vec<f64> = (0..grid.cells())
            .map(|k| {
                if span.contains(&k) {
                    if k < mid {
                        -1.0
                    } else {
                        1.0
                    }
                } else {
                    0.0
                }
            })
            .collect();
        let bl = SampledFunction::new(grid, vals).unwrap();
        let one: BTreeMap<Cube, SampledFunction> = [(l, bl.clone())].into_iter().collect();
        assert_eq!(
            x_norm(&one, &p_coll, &lg, 2.0, true).unwrap(),
            y_norm(&bl, &p_coll, &lg, 2.0).unwrap()
        );

        let ind = SampledFunction::constant(grid, 1.0).restricted(span);
        let bad: BTreeMap<Cube, SampledFunction> = [(l, ind)].into_iter().collect();
        assert!(matches!(
            x_norm(&bad, &p_coll, &lg, 2.0, true),
            Err(crate::Error::Precondition(_))
        ));
    }

    #[test]
    fn cz_examples() {
        let lg = setup();
        let grid = *lg.grid();
        let l = Cube::new(-1, 2);
        let p_coll = StoppingCollection {
            top: Cube::new(1, 0),
            members: vec![l, Cube::new(-3, -9)],
        };
        let c = SampledFunction::constant(grid, 0.75);
        let cz = cz_decompose(&c, &p_coll, &lg).unwrap();
        assert_eq!(cz.good, c);
        assert!(cz.bad.values().all(|b| b.is_zero()));

        let span = lg.cube_span(l);
        let mid = (span.start + span.end) / 2;
        let left = SampledFunction::new(
            grid,
            (0..grid.cells())
                .map(|k| f64::from(u8::from((span.start..mid).contains(&k))))
                .collect(),
        )
        .unwrap();
        let cz = cz_decompose(&left, &p_coll, &lg).unwrap();
        for k in span {
            let expect = if k < mid { 0.5 } else { -0.5 };
            assert_eq!(cz.bad[&l].values()[k], expect);
        }

        let overlapping = StoppingCollection {
            top: Cube::new(1, 0),
            members: vec![Cube::new(-1, 2), Cube::new(-2, 4)],
        };
        assert!(cz_decompose(&left, &overlapping, &lg).is_err());
    }

    #[test]
    fn cz_reconstructs_quantized_samples() {
        let lg = setup();
        let grid = *lg.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = SampledFunction::new(
            grid,
            (0..grid.cells())
                .map(|_| rng.gen_range(-1i64 << 40..1i64 << 40) as f64 * 2f64.powi(-30))
                .collect(),
        )
        .unwrap();
        let p_coll = StoppingCollection {
            top: Cube::new(1, 0),
            members: vec![Cube::new(0, -2), Cube::new(-3, 1), Cube::new(-5, 40)],
        };
        let cz = cz_decompose(&h, &p_coll, &lg).unwrap();
        let sum = cz.good.combine(1.0, &cz.bad_sum(), 1.0).unwrap();
        assert_eq!(sum, h);
        for (l, b) in &cz.bad {
            let mean: f64 = b.values()[lg.cube_span(*l)].iter().sum::<f64>() * grid.step();
            assert!(mean.abs() <= 1e-8 * lg.measure(*l) * h.sup_norm());
        }
    }

    #[test]
    fn dplerner_examples() {
        let grid = Grid::line(2.0, 128).unwrap();
        let q = GridRegion::interval(-1.0, 1.0).unwrap();
        let one = SampledFunction::constant(grid, 1.0);
        assert!((check_dplerner(&one, &q, 0.25).unwrap() - 0.5).abs() < 1e-12);
        let zero = SampledFunction::zeros(grid);
        assert_eq!(check_dplerner(&zero, &q, 0.25).unwrap(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn interval_maximal_matches_brute_force(
            vals in proptest::collection::vec(-5.0f64..5.0, 1..40),
            p in 1.0f64..4.0,
        ) {
            let fast = interval_maximal(&vals, p);
            for x in 0..vals.len() {
                let slow = brute_maximal_at(&vals, p, x);
                prop_assert!((fast[x] - slow).abs() <= 1e-12 * slow.max(1e-300));
            }
        }

        #[test]
        fn y_norm_increases_with_p(seed in 0u64..1000) {
            let lg = setup();
            let grid = *lg.grid();
            let h = random_test_function(grid, seed, Smoothness::RoughIndicator, &GridRegion::interval(-4.0, 4.0).unwrap(), 2.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let members: Vec<Cube> = (0..4).map(|i| Cube::new(-3, rng.gen_range(-4..4) * 4 + i)).collect();
            let mut members = members;
            members.sort();
            members.dedup();
            let p_coll = StoppingCollection { top: Cube::new(1, 0), members };
            let mut prev = 0.0;
            for p in [1.0, 1.5, 2.0, 3.0, f64::INFINITY] {
                let y = y_norm(&h, &p_coll, &lg, p).unwrap();
                prop_assert!(y >= prev - 1e-10);
                prev = y;
            }
        }
    }
}
