//! One runner per experiment kind. Each returns per-trial rows and batch
//! aggregates; nothing here depends on wall-clock time.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sparsedom::dyadic::{check_sparsity, LatticeGrid, StoppingCollection};
use sparsedom::grid::{derive_seed, random_test_function, GridRegion, SampledFunction, Smoothness};
use sparsedom::kernel::{estimate_ct, OmegaSpec, ScalePartition};
use sparsedom::localnorms::{cz_decompose, x_norm, y_norm};
use sparsedom::lp::{estimate_piece_decay, estimate_piece_smoothness, LpDecomposition};
use sparsedom::sparse::{
    assumption_l_report, build_sparse, domination_report, failing_collections, psf_eval,
    random_stopping_collection, BPosition,
};
use sparsedom::weights::{product_power_triple, weighted_estimate_report, Weight, WeightedKind};

use crate::config::{EstimateKind, ExperimentConfig, ExperimentKind};
use crate::inputs::{lattice_triple, InputPreset};

pub type Row = BTreeMap<String, Value>;

/// The numeric part of a report: per-trial rows and batch aggregates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub records: Vec<Row>,
    pub aggregates: BTreeMap<String, Value>,
}

macro_rules! row {
    ($($k:expr => $v:expr),* $(,)?) => {{
        let mut r = Row::new();
        $(r.insert($k.to_string(), json!($v));)*
        r
    }};
}

/// Non-finite floats serialize as strings so reports stay valid JSON.
pub fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(x.to_string())
    }
}

pub fn parse_pair(name: &str) -> Option<(f64, f64)> {
    let rest = name.strip_prefix("product-power:")?;
    let (a, b) = rest.split_once(',')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

pub fn run_experiment(c: &ExperimentConfig) -> Result<Payload> {
    let omega = OmegaSpec::from_name(&c.omega, c.seed)?;
    match c.kind {
        ExperimentKind::Psf => psf(c),
        ExperimentKind::SparseBuild => sparse_build(c),
        ExperimentKind::Dominate => dominate(c, &omega),
        ExperimentKind::AssumptionL => assumption_l(c, &omega),
        ExperimentKind::Weights => weights(c, &omega),
        ExperimentKind::LpDecay => lp_decay(c, &omega),
        ExperimentKind::CzProps => cz_props(c),
    }
}

fn lattice(c: &ExperimentConfig) -> Result<LatticeGrid> {
    c.lattice_grid().map_err(|e| anyhow!(e))
}

fn presets(c: &ExperimentConfig) -> Result<[InputPreset; 3]> {
    c.input_presets().map_err(|e| anyhow!(e))
}

fn psf(c: &ExperimentConfig) -> Result<Payload> {
    let lg = lattice(c)?;
    let grid = *lg.grid();
    let names = c
        .inputs
        .clone()
        .map_or([InputPreset::One; 3], |_| presets(c).expect("validated"));
    let full = grid.full_region();
    let fs: Vec<SampledFunction> = names
        .iter()
        .enumerate()
        .map(|(i, p)| p.generate(grid, &full, derive_seed(c.seed, i as u64 + 1)))
        .collect::<sparsedom::Result<_>>()?;
    let fs = [&fs[0], &fs[1], &fs[2]];
    let mut records = Vec::new();
    for &q in &c.cubes {
        let term = psf_eval(&lg, &[q], c.exponents, fs)?;
        records.push(
            row! { "cube" => q.to_string(), "measure" => lg.measure(q), "term" => num(term) },
        );
    }
    let total = psf_eval(&lg, &c.cubes, c.exponents, fs)?;
    let mut aggregates = BTreeMap::new();
    aggregates.insert("psf".into(), num(total));
    aggregates.insert("cubes".into(), json!(c.cubes.len()));
    Ok(Payload {
        records,
        aggregates,
    })
}

/// Invariant checks for one sparse build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildCheck {
    pub levels: usize,
    pub cubes: usize,
    pub measured_eta: f64,
    pub sparsity_valid: bool,
    pub failing_collections: usize,
    pub collections: usize,
    pub max_exceptional_ratio: f64,
    pub orphans: usize,
    pub stalled: bool,
}

impl BuildCheck {
    pub fn passes(&self) -> bool {
        self.sparsity_valid
            && self.failing_collections == 0
            && self.measured_eta >= 0.5
            && self.max_exceptional_ratio <= 0.5
            && !self.stalled
    }
}

pub fn check_build(
    lg: &LatticeGrid,
    fs: [&SampledFunction; 3],
    p: [f64; 3],
    c_d: f64,
) -> Result<BuildCheck> {
    let r = build_sparse(lg, fs, p, c_d)?;
    let sparsity = check_sparsity(&r.sparse, lg);
    Ok(BuildCheck {
        levels: r.levels,
        cubes: r.sparse.cubes.len(),
        measured_eta: sparsity.measured_eta,
        sparsity_valid: sparsity.valid,
        failing_collections: failing_collections(&r, lg).len(),
        collections: r.stopping_tree.len(),
        max_exceptional_ratio: r.exceptional_ratio.iter().fold(0.0, |m: f64, &x| m.max(x)),
        orphans: r.orphans,
        stalled: r.stalled,
    })
}

fn to_row(v: impl Serialize) -> Row {
    match serde_json::to_value(v).expect("plain data serializes") {
        Value::Object(m) => m.into_iter().collect(),
        other => row! { "value" => other },
    }
}

fn sparse_build(c: &ExperimentConfig) -> Result<Payload> {
    let lg = lattice(c)?;
    let names = presets(c)?;
    let checks: Vec<BuildCheck> = (0..c.trials as u64)
        .map(|t| {
            let fs = lattice_triple(&lg, names, derive_seed(c.seed, t))?;
            check_build(&lg, [&fs[0], &fs[1], &fs[2]], c.exponents, c.c_d)
        })
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    for (t, ch) in checks.iter().enumerate() {
        let mut r = to_row(ch);
        r.insert("trial".into(), json!(t));
        records.push(r);
    }
    let mut aggregates = BTreeMap::new();
    aggregates.insert(
        "all_pass".into(),
        json!(checks.iter().all(BuildCheck::passes)),
    );
    aggregates.insert(
        "min_eta".into(),
        num(checks.iter().map(|c| c.measured_eta).fold(1.0, f64::min)),
    );
    aggregates.insert(
        "max_levels".into(),
        json!(checks.iter().map(|c| c.levels).max()),
    );
    aggregates.insert(
        "failing_collections".into(),
        json!(checks.iter().map(|c| c.failing_collections).sum::<usize>()),
    );
    Ok(Payload {
        records,
        aggregates,
    })
}

fn dominate(c: &ExperimentConfig, omega: &OmegaSpec) -> Result<Payload> {
    let lg = lattice(c)?;
    let names = presets(c)?;
    let window = c.window.window();
    let reports = (0..c.trials as u64)
        .map(|t| {
            let fs = lattice_triple(&lg, names, derive_seed(c.seed, t))?;
            Ok(domination_report(
                omega,
                &ScalePartition,
                &lg,
                [&fs[0], &fs[1], &fs[2]],
                c.exponents,
                &window,
                c.c_d,
            )?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    for (t, r) in reports.iter().enumerate() {
        records.push(row! {
            "trial" => t,
            "seed" => derive_seed(c.seed, t as u64),
            "window" => format!("({}, {})", window.mu, window.nu),
            "lambda" => num(r.lambda),
            "psf" => num(r.psf),
            "ratio" => num(r.ratio),
            "anomaly" => r.anomaly,
            "levels" => r.levels,
            "sparse_size" => r.sparse_size,
            "eta" => num(r.measured_eta),
        });
    }
    let mut aggregates = BTreeMap::new();
    aggregates.insert(
        "max_ratio".into(),
        num(reports.iter().map(|r| r.ratio).fold(0.0, f64::max)),
    );
    aggregates.insert(
        "anomalies".into(),
        json!(reports.iter().filter(|r| r.anomaly).count()),
    );
    aggregates.insert("window".into(), json!([window.mu, window.nu]));
    if let Some([r1, r2, a]) = c.holder {
        let ct = estimate_ct(
            omega,
            &ScalePartition,
            *lg.grid(),
            (r1, r2, a),
            &window,
            c.trials,
            c.seed,
        )?;
        aggregates.insert(
            "c_t_estimate".into(),
            num(ct.last().copied().unwrap_or(0.0)),
        );
    }
    Ok(Payload {
        records,
        aggregates,
    })
}

fn assumption_l(c: &ExperimentConfig, omega: &OmegaSpec) -> Result<Payload> {
    let lg = lattice(c)?;
    let position = BPosition::from_index(c.position.unwrap_or(1))?;
    let window = c.window.window();
    let rep = assumption_l_report(
        omega,
        &ScalePartition,
        &lg,
        &window,
        c.exponents,
        position,
        c.trials,
        c.seed,
    )?;
    let records = rep
        .ratios
        .iter()
        .enumerate()
        .map(|(t, r)| row! { "trial" => t, "ratio" => r.map_or(Value::Null, num) })
        .collect();
    let mut aggregates = BTreeMap::new();
    aggregates.insert("max_ratio".into(), num(rep.max_ratio));
    aggregates.insert("skipped".into(), json!(rep.skipped));
    aggregates.insert("position".into(), json!(position.index() + 1));
    Ok(Payload {
        records,
        aggregates,
    })
}

/// Builds the estimate described by the weights section.
pub fn weighted_kind(c: &ExperimentConfig) -> Result<WeightedKind> {
    let w = c
        .weights
        .as_ref()
        .ok_or_else(|| anyhow!("weights section missing"))?;
    let grid = c.grid.grid().map_err(|e| anyhow!(e))?;
    let named = |i: usize| -> Result<Weight> { Ok(Weight::from_name(grid, &w.weights[i])?) };
    Ok(match w.estimate {
        EstimateKind::Single => WeightedKind::Single {
            q: w.q.ok_or_else(|| anyhow!("q missing"))?,
            w: named(0)?,
        },
        EstimateKind::TwoWeight => {
            let [p1, p2] = w.p_pair.ok_or_else(|| anyhow!("p_pair missing"))?;
            WeightedKind::TwoWeight {
                p1,
                p2,
                w1: named(0)?,
                w2: named(1)?,
            }
        }
        EstimateKind::Multilinear => {
            let p = w.p.ok_or_else(|| anyhow!("p missing"))?;
            let q = w.q_tuple.ok_or_else(|| anyhow!("q_tuple missing"))?;
            let v = match parse_pair(&w.weights[0]) {
                Some((a, b)) => product_power_triple(grid, a, b, q)?,
                None if w.weights.len() == 3 => [named(0)?, named(1)?, named(2)?],
                None => bail!("multilinear estimate needs three weights or a product-power preset"),
            };
            WeightedKind::Multilinear { p, q, v }
        }
    })
}

fn weights(c: &ExperimentConfig, omega: &OmegaSpec) -> Result<Payload> {
    let w = c
        .weights
        .as_ref()
        .ok_or_else(|| anyhow!("weights section missing"))?;
    let grid = c.grid.grid().map_err(|e| anyhow!(e))?;
    let kind = weighted_kind(c)?;
    let support = match w.support {
        Some([lo, hi]) => GridRegion::interval(lo, hi)?,
        None => GridRegion::interval(-grid.half_width() / 2.0, grid.half_width() / 2.0)?,
    };
    let rep = weighted_estimate_report(
        omega,
        &ScalePartition,
        &kind,
        &support,
        c.trials,
        &c.window.window(),
        c.seed,
        w.ceiling,
    )?;
    let records = rep
        .ratios
        .iter()
        .enumerate()
        .map(|(t, r)| row! { "trial" => t, "ratio" => num(*r) })
        .collect();
    let mut aggregates = BTreeMap::new();
    aggregates.insert("batch_max".into(), num(rep.batch_max));
    aggregates.insert(
        "characteristics".into(),
        json!(rep
            .characteristics
            .iter()
            .map(|x| num(*x))
            .collect::<Vec<_>>()),
    );
    aggregates.insert("weights".into(), json!(rep.weights));
    aggregates.insert("estimate".into(), json!(rep.kind));
    aggregates.insert("family".into(), json!(rep.family));
    aggregates.insert("ceiling".into(), num(rep.ceiling));
    Ok(Payload {
        records,
        aggregates,
    })
}

fn lp_decay(c: &ExperimentConfig, omega: &OmegaSpec) -> Result<Payload> {
    let lp = c.lp.ok_or_else(|| anyhow!("lp section missing"))?;
    let rep = estimate_piece_decay(omega, lp.j_min..=lp.j_max, lp.cells, c.trials, c.seed)?;
    let smooth: Option<Vec<f64>> = match lp.eta {
        Some(eta) => {
            let dec = LpDecomposition::new(omega, 2 * lp.cells.next_power_of_two(), 1.0, None)?;
            Some(
                (lp.j_min..=lp.j_max)
                    .map(|j| {
                        let s = estimate_piece_smoothness(
                            &dec.piece(j),
                            eta,
                            lp.samples,
                            derive_seed(c.seed, 0x5300 + j as u64),
                        )?;
                        Ok(s.last().copied().unwrap_or(0.0))
                    })
                    .collect::<sparsedom::Result<_>>()?,
            )
        }
        None => None,
    };
    let mut records = Vec::new();
    for (i, (j, run)) in rep.estimates.iter().enumerate() {
        let mut r = row! { "j" => j, "estimate" => num(*run.last().unwrap_or(&0.0)), "trials" => c.trials, "seed" => c.seed };
        if let Some(s) = &smooth {
            r.insert("smoothness".into(), num(s[i]));
        }
        records.push(r);
    }
    let mut aggregates = BTreeMap::new();
    aggregates.insert(
        "slope_nonnegative_j".into(),
        rep.slope_nonnegative_j.map_or(Value::Null, num),
    );
    aggregates.insert(
        "slope_nonpositive_j".into(),
        rep.slope_nonpositive_j.map_or(Value::Null, num),
    );
    aggregates.insert("i_window".into(), json!([rep.i_window.0, rep.i_window.1]));
    Ok(Payload {
        records,
        aggregates,
    })
}

/// Checks of one Calderón–Zygmund decomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CzCheck {
    pub members: usize,
    pub collection_valid: bool,
    pub exact: bool,
    /// Largest `|∫_L b_L| / (|L| ‖h‖_∞)`.
    pub mean_defect: f64,
    pub h_y: f64,
    pub g_sup: f64,
    pub b_x: f64,
}

impl CzCheck {
    pub fn passes(&self) -> bool {
        self.collection_valid
            && self.exact
            && self.mean_defect <= 1e-8
            && self.g_sup <= 32.0 * self.h_y
            && self.b_x <= 64.0 * self.h_y
    }
}

pub fn cz_check(
    h: &SampledFunction,
    coll: &StoppingCollection,
    lg: &LatticeGrid,
    p: f64,
) -> Result<CzCheck> {
    let pair = cz_decompose(h, coll, lg)?;
    let bad = pair.bad_sum();
    let exact = pair
        .good
        .values()
        .iter()
        .zip(bad.values())
        .zip(h.values())
        .all(|((g, b), v)| g + b == *v);
    let sup = h.sup_norm();
    let step = lg.grid().step();
    let mean_defect = pair
        .bad
        .iter()
        .map(|(l, b)| {
            let integral: f64 = b.values()[lg.cube_span(*l)].iter().sum::<f64>() * step;
            if sup == 0.0 {
                0.0
            } else {
                integral.abs() / (lg.measure(*l) * sup)
            }
        })
        .fold(0.0, f64::max);
    Ok(CzCheck {
        members: coll.members.len(),
        collection_valid: sparsedom::dyadic::check_stopping_collection(
            coll,
            lg,
            sparsedom::dyadic::DilateMode::Resolved,
        )
        .is_empty(),
        exact,
        mean_defect,
        h_y: y_norm(h, coll, lg, p)?,
        g_sup: y_norm(&pair.good, coll, lg, f64::INFINITY)?,
        b_x: x_norm(&pair.bad, coll, lg, p, true)?,
    })
}

/// A seeded `(h, P)` pair; `h` is a quantized random function on `3Q0`.
pub fn cz_case(lg: &LatticeGrid, seed: u64) -> Result<(SampledFunction, StoppingCollection)> {
    let coll = random_stopping_collection(lg, derive_seed(seed, 0));
    let (_, three) = crate::inputs::top_regions(lg);
    let kind = if seed & 1 == 0 {
        Smoothness::RoughIndicator
    } else {
        Smoothness::BumpSum
    };
    let h = random_test_function(*lg.grid(), derive_seed(seed, 1), kind, &three, 1.0)?;
    Ok((h, coll))
}

fn cz_props(c: &ExperimentConfig) -> Result<Payload> {
    let lg = lattice(c)?;
    let checks: Vec<CzCheck> = (0..c.trials as u64)
        .into_par_iter()
        .map(|t| {
            let (h, coll) = cz_case(&lg, derive_seed(c.seed, t))?;
            cz_check(&h, &coll, &lg, c.exponents[0])
        })
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    for (t, ch) in checks.iter().enumerate() {
        let mut r = to_row(ch);
        r.insert("trial".into(), json!(t));
        records.push(r);
    }
    let ratio = |f: fn(&CzCheck) -> f64| {
        checks
            .iter()
            .filter(|c| c.h_y > 0.0)
            .map(|c| f(c) / c.h_y)
            .fold(0.0, f64::max)
    };
    let mut aggregates = BTreeMap::new();
    aggregates.insert("all_pass".into(), json!(checks.iter().all(CzCheck::passes)));
    aggregates.insert("max_good_ratio".into(), num(ratio(|c| c.g_sup)));
    aggregates.insert("max_bad_ratio".into(), num(ratio(|c| c.b_x)));
    aggregates.insert(
        "max_mean_defect".into(),
        num(checks.iter().map(|c| c.mean_defect).fold(0.0, f64::max)),
    );
    Ok(Payload {
        records,
        aggregates,
    })
}
