//! Experiment configuration (JSON) and its validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sparsedom::dyadic::{Cube, DyadicLattice, LatticeGrid};
use sparsedom::grid::Grid;
use sparsedom::kernel::{check_holder, OmegaSpec, TruncationWindow};
use sparsedom::sparse::DEFAULT_CD;
use sparsedom::weights::{Weight, DEFAULT_AP_CEILING};

use crate::inputs::InputPreset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Psf,
    SparseBuild,
    Dominate,
    AssumptionL,
    Weights,
    LpDecay,
    CzProps,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Psf => "psf",
            Self::SparseBuild => "sparse-build",
            Self::Dominate => "dominate",
            Self::AssumptionL => "assumption-l",
            Self::Weights => "weights",
            Self::LpDecay => "lp-decay",
            Self::CzProps => "cz-props",
        }
    }

    fn uses_lattice(self) -> bool {
        !matches!(self, Self::Weights | Self::LpDecay)
    }
}

/// Symmetric box `[-R, R)` with step `h`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(rename = "R")]
    pub half_width: f64,
    pub h: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            half_width: 16.0,
            h: 0.0625,
        }
    }
}

impl GridConfig {
    pub fn grid(&self) -> Result<Grid, String> {
        let cells = 2.0 * self.half_width / self.h;
        if !(self.h > 0.0 && self.half_width > 0.0) || cells.fract() != 0.0 || !cells.is_finite() {
            return Err(format!(
                "grid: 2R/h must be a positive integer (R = {}, h = {})",
                self.half_width, self.h
            ));
        }
        Grid::line(self.half_width, cells as usize).map_err(|e| format!("grid: {e}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub shift: f64,
    pub s_min: i32,
    pub s_max: i32,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self {
            shift: 0.0,
            s_min: -4,
            s_max: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub mu: i32,
    pub nu: i32,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { mu: -4, nu: 3 }
    }
}

impl WindowConfig {
    pub fn window(&self) -> TruncationWindow {
        TruncationWindow::new(self.mu, self.nu)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateKind {
    Single,
    TwoWeight,
    Multilinear,
}

/// Settings for the weighted experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    pub estimate: EstimateKind,
    /// `q` of the single-weight estimate.
    #[serde(default)]
    pub q: Option<f64>,
    /// `(p1, p2)` of the two-weight estimate.
    #[serde(default)]
    pub p_pair: Option<[f64; 2]>,
    /// `p⃗` and `q⃗` of the multilinear estimate.
    #[serde(default)]
    pub p: Option<[f64; 3]>,
    #[serde(default)]
    pub q_tuple: Option<[f64; 3]>,
    /// Presets: `one`, `power:<α>`, or `product-power:<a>,<b>` for the
    /// multilinear triple.
    pub weights: Vec<String>,
    #[serde(default)]
    pub support: Option<[f64; 2]>,
    #[serde(default = "default_ceiling")]
    pub ceiling: f64,
}

fn default_ceiling() -> f64 {
    DEFAULT_AP_CEILING
}

/// Settings for the Littlewood–Paley experiments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpConfig {
    pub j_min: i32,
    pub j_max: i32,
    #[serde(default = "default_lp_cells")]
    pub cells: usize,
    /// When set, also estimate the smoothness modulus with this `η`.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_lp_cells() -> usize {
    128
}

fn default_samples() -> usize {
    20_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub csv: bool,
}

fn yes() -> bool {
    true
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            csv: true,
        }
    }
}

fn default_omega() -> String {
    "commutator".into()
}

fn default_exponents() -> [f64; 3] {
    [1.1, 1.1, 1.1]
}

fn default_cd() -> f64 {
    DEFAULT_CD
}

fn default_trials() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub lattice: LatticeConfig,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default = "default_omega")]
    pub omega: String,
    /// Exponents of the sparse form, norms and averages.
    #[serde(default = "default_exponents")]
    pub exponents: [f64; 3],
    /// Hölder triple `(r1, r2, α)` for the bilinear operator bound.
    #[serde(default)]
    pub holder: Option<[f64; 3]>,
    #[serde(default = "default_cd")]
    pub c_d: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Input presets for `f1, f2, f3`.
    #[serde(default)]
    pub inputs: Option<[String; 3]>,
    /// Cubes of the collection for `psf`, written `level:anchor`.
    #[serde(default)]
    pub cubes: Vec<Cube>,
    /// Argument carrying `b` for `assumption-l`.
    #[serde(default)]
    pub position: Option<u8>,
    #[serde(default)]
    pub weights: Option<WeightsConfig>,
    #[serde(default)]
    pub lp: Option<LpConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Minimal config of the given kind with every default filled in.
    pub fn new(kind: ExperimentKind) -> Self {
        serde_json::from_value(serde_json::json!({ "kind": kind })).expect("defaults deserialize")
    }

    pub fn lattice_grid(&self) -> Result<LatticeGrid, String> {
        let grid = self.grid.grid()?;
        let l = self.lattice;
        let lattice =
            DyadicLattice::new(l.shift, l.s_min, l.s_max).map_err(|e| format!("lattice: {e}"))?;
        LatticeGrid::new(grid, lattice).map_err(|e| format!("lattice: {e}"))
    }

    pub fn input_presets(&self) -> Result<[InputPreset; 3], String> {
        let names = self
            .inputs
            .clone()
            .unwrap_or_else(|| ["bump".into(), "rough".into(), "bump".into()]);
        let mut out = [InputPreset::Zero; 3];
        for (o, n) in out.iter_mut().zip(&names) {
            *o = n.parse().map_err(|e| format!("inputs: {e}"))?;
        }
        Ok(out)
    }
}

/// Every reason `run` would reject the config; empty when it is accepted.
pub fn validate(c: &ExperimentConfig) -> Vec<String> {
    let mut v = Vec::new();
    let grid = match c.grid.grid() {
        Ok(g) => Some(g),
        Err(e) => {
            v.push(e);
            None
        }
    };
    let lg = if c.kind.uses_lattice() && grid.is_some() {
        match c.lattice_grid() {
            Ok(lg) => Some(lg),
            Err(e) => {
                v.push(e);
                None
            }
        }
    } else {
        None
    };
    if c.window.mu > c.window.nu {
        v.push(format!(
            "window: mu = {} exceeds nu = {}",
            c.window.mu, c.window.nu
        ));
    }
    if let Err(e) = OmegaSpec::from_name(&c.omega, c.seed) {
        v.push(format!("omega: {e}"));
    }
    for (i, &p) in c.exponents.iter().enumerate() {
        if !(p >= 1.0) {
            v.push(format!("exponents: p_{} = {p} is below 1", i + 1));
        }
    }
    if let Some([r1, r2, a]) = c.holder {
        if let Err(e) = check_holder(r1, r2, a) {
            v.push(format!("holder: {e}"));
        }
    }
    if !(c.c_d > 0.0 && c.c_d.is_finite()) {
        v.push(format!("c_d: must be positive and finite, got {}", c.c_d));
    }
    if c.trials == 0 {
        v.push("trials: need at least one".into());
    }
    if let Err(e) = c.input_presets() {
        v.push(e);
    }
    let window = c.window.window();
    if let Some(lg) = &lg {
        let lat = lg.lattice();
        let needs_top = matches!(
            c.kind,
            ExperimentKind::SparseBuild
                | ExperimentKind::Dominate
                | ExperimentKind::AssumptionL
                | ExperimentKind::CzProps
        );
        if needs_top {
            let (a, b) = lg.dilate_cells(lg.top_cube(), 3);
            if a < 0 || b > lg.cells() as i64 {
                v.push(format!(
                    "lattice: 3Q0 for the top cube {} does not fit in the grid",
                    lg.top_cube()
                ));
            }
        }
        if matches!(c.kind, ExperimentKind::Dominate)
            && !window.is_empty()
            && lat.s_max <= window.top()
        {
            v.push(format!(
                "lattice top smaller than truncation top (s_max = {}, window top = {})",
                lat.s_max,
                window.top()
            ));
        }
        if c.kind == ExperimentKind::Psf {
            if c.cubes.is_empty() {
                v.push("cubes: psf needs at least one cube".into());
            }
            for q in &c.cubes {
                if !lg.in_grid(*q) || q.level < lg.cell_level() {
                    v.push(format!("cubes: {q} is not a lattice cube inside the grid"));
                }
            }
        }
    }
    match c.kind {
        ExperimentKind::AssumptionL => match c.position {
            Some(1..=3) => {}
            other => v.push(format!("position: must be 1, 2 or 3, got {other:?}")),
        },
        ExperimentKind::Weights => match &c.weights {
            None => v.push("weights: section missing".into()),
            Some(w) => {
                if let Some(g) = grid {
                    v.extend(validate_weights(w, g));
                }
            }
        },
        ExperimentKind::LpDecay => match &c.lp {
            None => v.push("lp: section missing".into()),
            Some(lp) => {
                if lp.j_min > lp.j_max {
                    v.push(format!(
                        "lp: j_min = {} exceeds j_max = {}",
                        lp.j_min, lp.j_max
                    ));
                }
                if lp.cells < 4 {
                    v.push("lp: need at least 4 cells".into());
                }
                if let Some(eta) = lp.eta {
                    if !(eta > 0.0 && eta < 1.0) {
                        v.push(format!("lp: eta must lie in (0, 1), got {eta}"));
                    }
                }
            }
        },
        _ => {}
    }
    v
}

fn validate_weights(w: &WeightsConfig, grid: Grid) -> Vec<String> {
    let mut v = Vec::new();
    let count = |n: usize, v: &mut Vec<String>| {
        if w.weights.len() != n {
            v.push(format!(
                "weights: expected {n} weight presets, got {}",
                w.weights.len()
            ));
        }
    };
    match w.estimate {
        EstimateKind::Single => {
            count(1, &mut v);
            match w.q {
                Some(q) if q > 1.0 && q.is_finite() => {}
                other => v.push(format!(
                    "weights: single estimate needs 1 < q < inf, got {other:?}"
                )),
            }
        }
        EstimateKind::TwoWeight => {
            count(2, &mut v);
            match w.p_pair {
                Some([a, b]) if a > 1.0 && b > 1.0 && a.is_finite() && b.is_finite() => {}
                other => v.push(format!(
                    "weights: two-weight estimate needs 1 < p1, p2 < inf, got {other:?}"
                )),
            }
        }
        EstimateKind::Multilinear => {
            let (Some(p), Some(q)) = (w.p, w.q_tuple) else {
                v.push("weights: multilinear estimate needs p and q_tuple".into());
                return v;
            };
            let s: f64 = q.iter().map(|x| 1.0 / x).sum();
            if (s - 1.0).abs() > 1e-12 {
                v.push(format!("weights: need 1/q_1 + 1/q_2 + 1/q_3 = 1, got {s}"));
            }
            for i in 0..3 {
                if !(p[i] > 1.0 && p[i] < q[i]) {
                    v.push(format!(
                        "weights: need 1 < p_{0} < q_{0}, got {1} and {2}",
                        i + 1,
                        p[i],
                        q[i]
                    ));
                }
            }
            let product = w.weights.len() == 1 && w.weights[0].starts_with("product-power:");
            if !product {
                count(3, &mut v);
            }
        }
    }
    for name in &w.weights {
        if name.starts_with("product-power:") {
            if crate::experiments::parse_pair(name).is_none() {
                v.push(format!("weights: bad preset {name:?}"));
            }
        } else if let Err(e) = Weight::from_name(grid, name) {
            v.push(format!("weights: {e}"));
        }
    }
    if !(w.ceiling > 1.0) {
        v.push(format!("weights: ceiling must exceed 1, got {}", w.ceiling));
    }
    if let Some([lo, hi]) = w.support {
        if !(lo < hi) || lo < -grid.half_width() || hi > grid.half_width() {
            v.push(format!(
                "weights: support [{lo}, {hi}) is not inside the grid"
            ));
        }
    }
    v
}
