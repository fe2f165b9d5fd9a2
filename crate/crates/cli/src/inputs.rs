//! Seeded input functions named in configs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sparsedom::dyadic::LatticeGrid;
use sparsedom::grid::{
    derive_seed, random_test_function, Grid, GridRegion, SampledFunction, Smoothness,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputPreset {
    Zero,
    /// Indicator of the support region.
    One,
    Bump,
    Rough,
    /// Rough function plus one to three tall single-cell spikes.
    Spiky,
}

impl FromStr for InputPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "zero" => Ok(Self::Zero),
            "one" => Ok(Self::One),
            "bump" => Ok(Self::Bump),
            "rough" => Ok(Self::Rough),
            "spiky" => Ok(Self::Spiky),
            _ => Err(format!(
                "unknown input preset {s:?} (zero, one, bump, rough, spiky)"
            )),
        }
    }
}

impl fmt::Display for InputPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Zero => "zero",
            Self::One => "one",
            Self::Bump => "bump",
            Self::Rough => "rough",
            Self::Spiky => "spiky",
        };
        f.write_str(s)
    }
}

impl InputPreset {
    pub fn generate(
        self,
        grid: Grid,
        support: &GridRegion,
        seed: u64,
    ) -> sparsedom::Result<SampledFunction> {
        match self {
            Self::Zero => Ok(SampledFunction::zeros(grid)),
            Self::One => {
                let cells = grid.region_cells(support)?.indices();
                let mut v = vec![0.0; grid.len()];
                for k in cells {
                    v[k] = 1.0;
                }
                SampledFunction::new(grid, v)
            }
            Self::Bump => random_test_function(grid, seed, Smoothness::BumpSum, support, 1.0),
            Self::Rough => {
                random_test_function(grid, seed, Smoothness::RoughIndicator, support, 1.0)
            }
            Self::Spiky => {
                let base =
                    random_test_function(grid, seed, Smoothness::RoughIndicator, support, 1.0)?;
                let cells = grid.region_cells(support)?.indices();
                let mut v = base.into_values();
                let mut z = derive_seed(seed, 0x5eed);
                for _ in 0..1 + z % 3 {
                    z = derive_seed(z, 1);
                    let k = cells[(z % cells.len() as u64) as usize];
                    v[k] = 10f64.powi(3 + ((z >> 40) % 4) as i32);
                }
                SampledFunction::new(grid, v)
            }
        }
    }
}

/// `Q0` and `3Q0` of the lattice as regions.
pub fn top_regions(lg: &LatticeGrid) -> (GridRegion, GridRegion) {
    let lat = lg.lattice();
    let q0 = lat.region(lg.top_cube());
    let (lo, hi) = (q0.lower()[0], q0.upper()[0]);
    let side = hi - lo;
    let three = GridRegion::interval(lo - side, hi + side).expect("positive side");
    (q0, three)
}

/// A triple with `f1` supported in `Q0` and `f2, f3` in `3Q0`.
pub fn lattice_triple(
    lg: &LatticeGrid,
    presets: [InputPreset; 3],
    seed: u64,
) -> sparsedom::Result<[SampledFunction; 3]> {
    let (q0, three) = top_regions(lg);
    let grid = *lg.grid();
    Ok([
        presets[0].generate(grid, &q0, derive_seed(seed, 1))?,
        presets[1].generate(grid, &three, derive_seed(seed, 2))?,
        presets[2].generate(grid, &three, derive_seed(seed, 3))?,
    ])
}
