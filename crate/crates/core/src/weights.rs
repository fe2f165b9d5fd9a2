//! Muckenhoupt characteristics over cube families, power weights, and the
//! weighted bilinear estimate experiments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, precondition, Result};
use crate::grid::{
    derive_seed, random_test_function, weighted_power_sum, Grid, GridRegion, SampleHeader,
    SampledFunction, Smoothness,
};
use crate::kernel::{apply_with_table, KernelTable, OmegaSpec, ScalePartition, TruncationWindow};
use crate::localnorms::CubeFamily;

/// Default bound below which a computed characteristic counts as membership.
pub const DEFAULT_AP_CEILING: f64 = 1e6;

/// Strictly positive samples on a one-dimensional grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Weight {
    values: SampledFunction,
    name: String,
}

impl Weight {
    pub fn new(values: SampledFunction, name: impl Into<String>) -> Result<Self> {
        if values.grid().dim() != 1 {
            return domain("weights live on one-dimensional grids");
        }
        if let Some(i) = values.values().iter().position(|&v| v <= 0.0) {
            return domain(format!("weight is not positive at cell {i}"));
        }
        Ok(Self {
            values,
            name: name.into(),
        })
    }

    pub fn one(grid: Grid) -> Self {
        Self {
            values: SampledFunction::constant(grid, 1.0),
            name: "one".into(),
        }
    }

    /// `max(|x|, h/2)^α`.
    pub fn power(grid: Grid, alpha: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return domain(format!("power must be finite, got {alpha}"));
        }
        let floor = grid.step() / 2.0;
        let f = SampledFunction::from_fn_1d(grid, |x| x.abs().max(floor).powf(alpha))?;
        Self::new(f, format!("power:{alpha}"))
    }

    /// Named presets: `one` and `power:<α>`.
    pub fn from_name(grid: Grid, name: &str) -> Result<Self> {
        if name == "one" {
            return Ok(Self::one(grid));
        }
        if let Some(a) = name.strip_prefix("power:") {
            let alpha: f64 = a
                .parse()
                .map_err(|_| crate::Error::Format(format!("bad power in weight {name:?}")))?;
            return Self::power(grid, alpha);
        }
        Err(crate::Error::Format(format!(
            "unknown weight preset {name:?}"
        )))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn function(&self) -> &SampledFunction {
        &self.values
    }

    pub fn grid(&self) -> &Grid {
        self.values.grid()
    }

    /// Cellwise `w^e`.
    pub fn pow(&self, e: f64) -> Self {
        Self {
            values: self
                .values
                .map(|v| v.powf(e))
                .expect("positive weights stay finite"),
            name: format!("({})^{e}", self.name),
        }
    }

    fn product(&self, other: &Weight) -> Result<Self> {
        Ok(Self {
            values: self.values.product(&other.values)?,
            name: format!("{}*{}", self.name, other.name),
        })
    }
}

/// Cell ranges `[a, b)` of every cube in the family.
fn family_intervals(grid: &Grid, family: &CubeFamily) -> Result<Vec<(usize, usize)>> {
    let n = grid.cells();
    match family {
        CubeFamily::AllIntervals => Ok((0..n)
            .flat_map(|a| (a + 1..=n).map(move |b| (a, b)))
            .collect()),
        CubeFamily::Dyadic(lg) => {
            if lg.grid() != grid {
                return domain("lattice grid differs from the weight grid");
            }
            let lat = lg.lattice();
            let mut out = Vec::new();
            for level in lat.s_min..=lat.s_max {
                let mut k = 0;
                while k < n {
                    let (a, b) = lg.cube_cells(lg.cube_of_cell(k, level));
                    if a >= 0 && b <= n as i64 {
                        out.push((a as usize, b as usize));
                    }
                    k = b as usize;
                }
            }
            Ok(out)
        }
    }
}

fn prefix(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut acc = 0.0;
    for v in values {
        acc += v;
        out.push(acc);
    }
    out
}

/// `sup_Q Π_k (avg_Q u_k)^{e_k}` over the family, with averages from prefix sums.
fn sup_product(grid: &Grid, family: &CubeFamily, factors: &[(Vec<f64>, f64)]) -> Result<f64> {
    let sums: Vec<(Vec<f64>, f64)> = factors
        .iter()
        .map(|(u, e)| (prefix(u.iter().copied()), *e))
        .collect();
    let eval = |(a, b): (usize, usize)| {
        let len = (b - a) as f64;
        sums.iter()
            .map(|(s, e)| ((s[b] - s[a]) / len).powf(*e))
            .product::<f64>()
    };
    let n = grid.cells();
    let best = match family {
        CubeFamily::AllIntervals => (0..n)
            .into_par_iter()
            .map(|a| (a + 1..=n).map(|b| eval((a, b))).fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max),
        CubeFamily::Dyadic(_) => family_intervals(grid, family)?
            .into_iter()
            .map(eval)
            .fold(0.0, f64::max),
    };
    Ok(best)
}

/// `[w]_{A_p} = sup_Q (avg_Q w)(avg_Q w^{-1/(p-1)})^{p-1}`.
pub fn ap_characteristic(w: &Weight, p: f64, family: &CubeFamily) -> Result<f64> {
    if p.is_nan() || p <= 1.0 || p.is_infinite() {
        return domain(format!("A_p needs a finite p > 1, got {p}"));
    }
    let v = w.values.values();
    let dual: Vec<f64> = v.iter().map(|x| x.powf(-1.0 / (p - 1.0))).collect();
    sup_product(w.grid(), family, &[(v.to_vec(), 1.0), (dual, p - 1.0)])
}

/// Checks `1 ≤ p_i < q_i`, `Σ 1/q_i = 1` and `Π v_i^{1/q_i} = 1` cellwise.
pub fn check_multilinear(v: [&Weight; 3], p: [f64; 3], q: [f64; 3]) -> Result<()> {
    for i in 0..3 {
        if !(p[i] >= 1.0 && p[i] < q[i] && q[i].is_finite()) {
            return domain(format!(
                "need 1 <= p_{0} < q_{0} < inf, got p_{0} = {1}, q_{0} = {2}",
                i + 1,
                p[i],
                q[i]
            ));
        }
    }
    let s: f64 = q.iter().map(|x| 1.0 / x).sum();
    if (s - 1.0).abs() > 1e-12 {
        return domain(format!("need 1/q_1 + 1/q_2 + 1/q_3 = 1, got {s}"));
    }
    let g = *v[0].grid();
    if v.iter().any(|w| *w.grid() != g) {
        return domain("weights live on different grids");
    }
    for k in 0..g.cells() {
        let prod: f64 = (0..3)
            .map(|i| v[i].values.values()[k].powf(1.0 / q[i]))
            .product();
        if (prod - 1.0).abs() > 1e-6 {
            return domain(format!(
                "need v_1^(1/q_1) v_2^(1/q_2) v_3^(1/q_3) = 1, got {prod} at cell {k}"
            ));
        }
    }
    Ok(())
}

/// `[v]_{A_q^p} = sup_Q Π_i (avg_Q v_i^{p_i/(p_i - q_i)})^{1/p_i - 1/q_i}`.
pub fn multilinear_characteristic(
    v: [&Weight; 3],
    p: [f64; 3],
    q: [f64; 3],
    family: &CubeFamily,
) -> Result<f64> {
    check_multilinear(v, p, q)?;
    let factors: Vec<(Vec<f64>, f64)> = (0..3)
        .map(|i| {
            let e = p[i] / (p[i] - q[i]);
            (
                v[i].values.values().iter().map(|x| x.powf(e)).collect(),
                1.0 / p[i] - 1.0 / q[i],
            )
        })
        .collect();
    sup_product(v[0].grid(), family, &factors)
}

/// A power weight with its all-interval characteristic.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerWeight {
    pub weight: Weight,
    pub characteristic: f64,
    pub member: bool,
}

pub fn power_weight(grid: Grid, alpha: f64, p: f64, ceiling: f64) -> Result<PowerWeight> {
    let weight = Weight::power(grid, alpha)?;
    let characteristic = ap_characteristic(&weight, p, &CubeFamily::AllIntervals)?;
    Ok(PowerWeight {
        member: characteristic < ceiling,
        weight,
        characteristic,
    })
}

/// `v_1 = |x|^a`, `v_2 = |x|^b` and `v_3` completing `Π v_i^{1/q_i} = 1`.
pub fn product_power_triple(grid: Grid, a: f64, b: f64, q: [f64; 3]) -> Result<[Weight; 3]> {
    let c = -(a * q[2] / q[0] + b * q[2] / q[1]);
    Ok([
        Weight::power(grid, a)?,
        Weight::power(grid, b)?,
        Weight::power(grid, c)?,
    ])
}

/// `(Σ |f|^p w h)^{1/p}` for any `p > 0`; below 1 this is a quasi-norm.
pub fn weighted_norm(f: &SampledFunction, p: f64, w: Option<&Weight>) -> Result<f64> {
    if p.is_nan() || p <= 0.0 {
        return domain(format!("norm exponent must be positive, got {p}"));
    }
    if let Some(w) = w {
        if w.grid() != f.grid() {
            return domain("weight and function live on different grids");
        }
    }
    if p.is_infinite() {
        return Ok(f.sup_norm());
    }
    let sum = weighted_power_sum(f.values(), p, w.map(|w| w.values.values()));
    Ok((sum * f.grid().cell_volume()).powf(1.0 / p))
}

/// Which weighted estimate to test.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightedKind {
    /// `‖T(f, g)‖_{L^{q/2}(w)} ≤ C ‖f‖_{L^q(w)} ‖g‖_{L^q(w)}`, `w ∈ A_q`.
    Single { q: f64, w: Weight },
    /// `‖T‖_{L^p(w_1^p w_2^p)} ≤ C ‖f_1‖_{L^{p_1}(W_1)} ‖f_2‖_{L^{p_2}(W_2)}`
    /// with `W_i = w_i^{p_i} ∈ A_{p_i}` given directly.
    TwoWeight {
        p1: f64,
        p2: f64,
        w1: Weight,
        w2: Weight,
    },
    /// `‖T‖_{L^{q_3'}(σ)} ≤ C ‖f_1‖_{L^{q_1}(v_1)} ‖f_2‖_{L^{q_2}(v_2)}` with
    /// `σ = v_3^{-q_3'/q_3}`.
    Multilinear {
        p: [f64; 3],
        q: [f64; 3],
        v: [Weight; 3],
    },
}

impl WeightedKind {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Single { .. } => "single",
            Self::TwoWeight { .. } => "two-weight",
            Self::Multilinear { .. } => "multilinear",
        }
    }
}

/// Output and input weights with exponents, after the membership checks.
struct Setup {
    out_p: f64,
    out_w: Weight,
    in_p: [f64; 2],
    in_w: [Weight; 2],
    characteristics: Vec<f64>,
    exponents: Vec<f64>,
    names: Vec<String>,
}

fn setup(kind: &WeightedKind, ceiling: f64) -> Result<Setup> {
    let member = |c: f64, what: &str| {
        if c < ceiling {
            Ok(c)
        } else {
            precondition(format!(
                "{what} characteristic {c} is not below the ceiling {ceiling}"
            ))
        }
    };
    match kind {
        WeightedKind::Single { q, w } => {
            if !(*q > 1.0 && q.is_finite()) {
                return domain(format!("need 1 < q < inf, got {q}"));
            }
            let c = member(ap_characteristic(w, *q, &CubeFamily::AllIntervals)?, "A_q")?;
            Ok(Setup {
                out_p: q / 2.0,
                out_w: w.clone(),
                in_p: [*q, *q],
                in_w: [w.clone(), w.clone()],
                characteristics: vec![c],
                exponents: vec![*q],
                names: vec![w.name().into()],
            })
        }
        WeightedKind::TwoWeight { p1, p2, w1, w2 } => {
            if !(*p1 > 1.0 && *p2 > 1.0 && p1.is_finite() && p2.is_finite()) {
                return domain(format!("need 1 < p_1, p_2 < inf, got {p1}, {p2}"));
            }
            let p = 1.0 / (1.0 / p1 + 1.0 / p2);
            let c1 = member(
                ap_characteristic(w1, *p1, &CubeFamily::AllIntervals)?,
                "A_p1",
            )?;
            let c2 = member(
                ap_characteristic(w2, *p2, &CubeFamily::AllIntervals)?,
                "A_p2",
            )?;
            let out_w = w1.pow(p / p1).product(&w2.pow(p / p2))?;
            Ok(Setup {
                out_p: p,
                out_w,
                in_p: [*p1, *p2],
                in_w: [w1.clone(), w2.clone()],
                characteristics: vec![c1, c2],
                exponents: vec![*p1, *p2, p],
                names: vec![w1.name().into(), w2.name().into()],
            })
        }
        WeightedKind::Multilinear { p, q, v } => {
            if p.iter().any(|&x| x <= 1.0) {
                return domain("need p_i > 1 for the multilinear estimate");
            }
            let c = member(
                multilinear_characteristic(
                    [&v[0], &v[1], &v[2]],
                    *p,
                    *q,
                    &CubeFamily::AllIntervals,
                )?,
                "multilinear",
            )?;
            let q3c = q[2] / (q[2] - 1.0);
            Ok(Setup {
                out_p: q3c,
                out_w: v[2].pow(-q3c / q[2]),
                in_p: [q[0], q[1]],
                in_w: [v[0].clone(), v[1].clone()],
                characteristics: vec![c],
                exponents: p.iter().chain(q).copied().collect(),
                names: v.iter().map(|w| w.name().to_string()).collect(),
            })
        }
    }
}

/// Ratios `LHS / RHS` of one weighted estimate over seeded input pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedExperimentReport {
    pub kind: String,
    pub exponents: Vec<f64>,
    pub weights: Vec<String>,
    pub characteristics: Vec<f64>,
    pub ceiling: f64,
    pub family: String,
    pub window: TruncationWindow,
    pub omega: String,
    pub ratios: Vec<f64>,
    pub batch_max: f64,
    pub seed: u64,
    pub grid: SampleHeader,
}

/// Seeded input pair supported in `support`.
pub fn weighted_inputs(
    grid: Grid,
    support: &GridRegion,
    seed: u64,
) -> Result<(SampledFunction, SampledFunction)> {
    let kind = |k: u64| {
        if derive_seed(seed, k) & 1 == 0 {
            Smoothness::BumpSum
        } else {
            Smoothness::RoughIndicator
        }
    };
    Ok((
        random_test_function(grid, derive_seed(seed, 1), kind(11), support, 1.0)?,
        random_test_function(grid, derive_seed(seed, 2), kind(12), support, 1.0)?,
    ))
}

/// One ratio from explicit inputs; `0` when either side vanishes.
pub fn weighted_ratio(
    table: &KernelTable,
    kind: &WeightedKind,
    f: &SampledFunction,
    g: &SampledFunction,
) -> Result<f64> {
    let s = setup(kind, f64::INFINITY)?;
    ratio_with(table, &s, f, g)
}

fn ratio_with(
    table: &KernelTable,
    s: &Setup,
    f: &SampledFunction,
    g: &SampledFunction,
) -> Result<f64> {
    let t = apply_with_table(table, f, g);
    let lhs = weighted_norm(&t, s.out_p, Some(&s.out_w))?;
    let rhs = weighted_norm(f, s.in_p[0], Some(&s.in_w[0]))?
        * weighted_norm(g, s.in_p[1], Some(&s.in_w[1]))?;
    Ok(if rhs == 0.0 { 0.0 } else { lhs / rhs })
}

#[allow(clippy::too_many_arguments)]
pub fn weighted_estimate_report(
    omega: &OmegaSpec,
    partition: &ScalePartition,
    kind: &WeightedKind,
    support: &GridRegion,
    trials: usize,
    window: &TruncationWindow,
    seed: u64,
    ceiling: f64,
) -> Result<WeightedExperimentReport> {
    let s = setup(kind, ceiling)?;
    let grid = *s.out_w.grid();
    let table = KernelTable::new(omega, partition, &grid, window);
    let ratios: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let (f, g) = weighted_inputs(grid, support, derive_seed(seed, t))?;
            ratio_with(&table, &s, &f, &g)
        })
        .collect::<Result<_>>()?;
    Ok(WeightedExperimentReport {
        kind: kind.label().into(),
        exponents: s.exponents,
        weights: s.names,
        characteristics: s.characteristics,
        ceiling,
        family: CubeFamily::AllIntervals.describe().into(),
        window: *window,
        omega: omega.name().into(),
        batch_max: ratios.iter().fold(0.0, |m: f64, &r| m.max(r)),
        ratios,
        seed,
        grid: grid_header(grid),
    })
}

fn grid_header(grid: Grid) -> SampleHeader {
    SampledFunction::zeros(grid).header()
}
