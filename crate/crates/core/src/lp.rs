//! Littlewood–Paley pieces of the kernel on a periodic square grid:
//! `K_j = Σ_i Δ_{j-i}(β_i K)`, the decay of the bilinear operators `T_j` in
//! `j`, and an empirical smoothness modulus for each piece.
//!
//! The grid has `n × n` points with spacing `h`, signed coordinates
//! `k h` for `k ∈ [-n/2, n/2)`, and frequencies `k / (n h)`. Both `Δ_j` and the
//! spatial partition `β_i` reuse the radial profile `φ` of
//! [`ScalePartition`]: `Δ_j` multiplies by `φ(2^{-j}|ξ|)` and
//! `β_i(z) = φ(2^{-i-1}|z|)`, which lives on `2^{i-1} < |z| < 2^{i+1}`.

use std::ops::RangeInclusive;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::grid::{derive_seed, lp_norm, random_test_function, Grid, SampledFunction, Smoothness};
use crate::kernel::{kernel_eval, OmegaSpec, ScalePartition};

/// Real samples on an `n × n` periodic grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicField {
    n: usize,
    step: f64,
    values: Vec<f64>,
}

impl PeriodicField {
    pub fn new(n: usize, step: f64, values: Vec<f64>) -> Result<Self> {
        if n < 4 || !n.is_power_of_two() {
            return domain(format!(
                "periodic grid size must be a power of two >= 4, got {n}"
            ));
        }
        if !(step.is_finite() && step > 0.0) {
            return domain(format!("grid step must be positive, got {step}"));
        }
        if values.len() != n * n {
            return domain(format!("expected {} samples, got {}", n * n, values.len()));
        }
        Ok(Self { n, step, values })
    }

    /// Samples `f` at the signed coordinates `(k1 h, k2 h)`.
    pub fn from_fn(n: usize, step: f64, f: impl Fn([f64; 2]) -> f64) -> Result<Self> {
        let mut values = vec![0.0; n * n];
        for (idx, v) in values.iter_mut().enumerate() {
            *v = f([
                signed(idx / n, n) as f64 * step,
                signed(idx % n, n) as f64 * step,
            ]);
        }
        Self::new(n, step, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Sample at signed offsets `(k1, k2)` (periodic).
    pub fn at(&self, k1: i64, k2: i64) -> f64 {
        let n = self.n as i64;
        self.values[(k1.rem_euclid(n) * n + k2.rem_euclid(n)) as usize]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

/// Signed representative in `[-n/2, n/2)` of an index in `[0, n)`.
fn signed(k: usize, n: usize) -> i64 {
    let k = k as i64;
    let n = n as i64;
    if k >= n / 2 {
        k - n
    } else {
        k
    }
}

/// Row-then-column complex FFT on an `n × n` array.
struct Fft2 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.n;
        let plan = if inverse {
            &self.inverse
        } else {
            &self.forward
        };
        plan.process(data);
        let mut col = vec![Complex64::default(); n];
        for c in 0..n {
            for r in 0..n {
                col[r] = data[r * n + c];
            }
            plan.process(&mut col);
            for r in 0..n {
                data[r * n + c] = col[r];
            }
        }
        if inverse {
            let scale = 1.0 / (n * n) as f64;
            data.iter_mut().for_each(|z| *z *= scale);
        }
    }

    fn forward_real(&self, values: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.run(&mut data, false);
        data
    }

    /// Inverse transform; returns the real part and the largest imaginary part.
    fn inverse_real(&self, mut spectrum: Vec<Complex64>) -> (Vec<f64>, f64) {
        self.run(&mut spectrum, true);
        let imag = spectrum.iter().fold(0.0, |m: f64, z| m.max(z.im.abs()));
        (spectrum.into_iter().map(|z| z.re).collect(), imag)
    }
}

/// `φ(2^{-j}|ξ|)` at every frequency of the grid.
fn multiplier(n: usize, step: f64, j: i32) -> Vec<f64> {
    let part = ScalePartition;
    let df = 1.0 / (n as f64 * step);
    (0..n * n)
        .map(|idx| {
            let xi = (signed(idx / n, n) as f64 * df).hypot(signed(idx % n, n) as f64 * df);
            if xi == 0.0 {
                0.0
            } else {
                part.phi_s(j, xi)
            }
        })
        .collect()
}

/// Frequency bands whose multipliers sum to 1 at every nonzero frequency.
pub fn resolvable_bands(n: usize, step: f64) -> RangeInclusive<i32> {
    let lowest = 1.0 / (n as f64 * step);
    let highest = std::f64::consts::FRAC_1_SQRT_2 / step;
    let lo = (1.0 + lowest.log2()).floor() as i32;
    let hi = (2.0 * highest).log2().ceil() as i32;
    lo..=hi
}

/// Spatial annuli `β_i` that fit in the periodic box without wrapping.
pub fn spatial_scales(n: usize, step: f64) -> RangeInclusive<i32> {
    let hi = (0.5 * n as f64 * step).log2().floor() as i32 - 1;
    let lo = step.log2().ceil() as i32 + 1;
    lo..=hi
}

/// `Δ_j f`: the frequency band `|ξ| ~ 2^j` of a periodic field.
pub fn lp_projection(f: &PeriodicField, j: i32) -> Result<PeriodicField> {
    let fft = Fft2::new(f.n);
    let mut spec = fft.forward_real(&f.values);
    for (z, m) in spec.iter_mut().zip(multiplier(f.n, f.step, j)) {
        *z *= m;
    }
    let (values, _) = fft.inverse_real(spec);
    PeriodicField::new(f.n, f.step, values)
}

/// `β_i(z) = φ(2^{-i-1}|z|)`.
pub fn annular_weight(i: i32, z: [f64; 2]) -> f64 {
    ScalePartition.phi_s(i + 1, z[0].hypot(z[1]))
}

/// One piece `K_j` on the periodic grid.
#[derive(Clone, Debug)]
pub struct LpKernelPiece {
    pub j: i32,
    pub i_window: RangeInclusive<i32>,
    pub field: PeriodicField,
    /// Largest imaginary part left by the inverse transform.
    pub imag_residue: f64,
}

/// Spectra of `β_i K` for every spatial scale, reused across pieces.
pub struct LpDecomposition {
    n: usize,
    step: f64,
    i_window: RangeInclusive<i32>,
    spectra: Vec<Vec<Complex64>>,
    fft: Fft2,
}

impl LpDecomposition {
    /// `i_window` defaults to every spatial scale that fits in the box.
    pub fn new(
        omega: &OmegaSpec,
        n: usize,
        step: f64,
        i_window: Option<RangeInclusive<i32>>,
    ) -> Result<Self> {
        PeriodicField::new(n, step, vec![0.0; n * n])?;
        let i_window = i_window.unwrap_or_else(|| spatial_scales(n, step));
        let fft = Fft2::new(n);
        let spectra = i_window
            .clone()
            .map(|i| {
                let f = PeriodicField::from_fn(n, step, |z| {
                    let b = annular_weight(i, z);
                    if b == 0.0 {
                        0.0
                    } else {
                        b * kernel_eval(omega, z).expect("annuli avoid the origin")
                    }
                })?;
                Ok(fft.forward_real(&f.values))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            n,
            step,
            i_window,
            spectra,
            fft,
        })
    }

    pub fn i_window(&self) -> RangeInclusive<i32> {
        self.i_window.clone()
    }

    /// `K_j = Σ_{i ∈ window} Δ_{j-i}(β_i K)`.
    pub fn piece(&self, j: i32) -> LpKernelPiece {
        let mut total = vec![Complex64::default(); self.n * self.n];
        for (i, spec) in self.i_window.clone().zip(&self.spectra) {
            let m = multiplier(self.n, self.step, j - i);
            for ((t, s), w) in total.iter_mut().zip(spec).zip(m) {
                if w != 0.0 {
                    *t += s * w;
                }
            }
        }
        let (values, imag) = self.fft.inverse_real(total);
        LpKernelPiece {
            j,
            i_window: self.i_window.clone(),
            field: PeriodicField::new(self.n, self.step, values).expect("valid size"),
            imag_residue: imag,
        }
    }

    /// `Σ_i β_i K` on the grid, the function the pieces add up to (up to its mean).
    pub fn partial_kernel(&self) -> PeriodicField {
        let mut total = vec![Complex64::default(); self.n * self.n];
        for spec in &self.spectra {
            for (t, s) in total.iter_mut().zip(spec) {
                *t += s;
            }
        }
        let (values, _) = self.fft.inverse_real(total);
        PeriodicField::new(self.n, self.step, values).expect("valid size")
    }
}

/// `K_j` for one `j`; see [`LpDecomposition`].
pub fn build_kernel_piece(
    omega: &OmegaSpec,
    n: usize,
    step: f64,
    j: i32,
    i_window: Option<RangeInclusive<i32>>,
) -> Result<LpKernelPiece> {
    Ok(LpDecomposition::new(omega, n, step, i_window)?.piece(j))
}

/// `T_j(f, g)(x) = Σ_{y1, y2} f(y1) g(y2) K_j(x - y1, x - y2) h^2` on an
/// ambient grid whose step matches the piece and whose width is at most half
/// the periodic box.
pub fn apply_piece(
    piece: &LpKernelPiece,
    f: &SampledFunction,
    g: &SampledFunction,
) -> Result<SampledFunction> {
    let grid = *f.grid();
    if *g.grid() != grid || grid.dim() != 1 {
        return domain("inputs must share a one-dimensional grid");
    }
    if (grid.step() - piece.field.step()).abs() > 1e-12 * grid.step() {
        return domain("ambient step differs from the kernel grid step");
    }
    let n = grid.cells();
    if 2 * n > piece.field.n() {
        return domain(format!(
            "ambient grid of {n} cells needs a periodic box of at least {} points",
            2 * n
        ));
    }
    let h2 = grid.step() * grid.step();
    let (fv, gv) = (f.values(), g.values());
    let out: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|x| {
            let mut acc = 0.0;
            for (y1, &a) in fv.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let k1 = x as i64 - y1 as i64;
                let mut inner = 0.0;
                for (y2, &b) in gv.iter().enumerate() {
                    inner += b * piece.field.at(k1, x as i64 - y2 as i64);
                }
                acc += a * inner;
            }
            acc * h2
        })
        .collect();
    SampledFunction::new(grid, out)
}

/// Per-`j` decay estimates with least-squares slopes of `log2(estimate)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    /// `(j, running maxima after each trial)`.
    pub estimates: Vec<(i32, Vec<f64>)>,
    pub slope_nonnegative_j: Option<f64>,
    pub slope_nonpositive_j: Option<f64>,
    pub i_window: (i32, i32),
    pub trials: usize,
    pub seed: u64,
}

impl DecayReport {
    pub fn final_estimate(&self, j: i32) -> Option<f64> {
        self.estimates
            .iter()
            .find(|(k, _)| *k == j)
            .and_then(|(_, v)| v.last().copied())
    }
}

/// Least-squares slope of `y` against `x`; `None` with fewer than two usable
/// points.
pub fn fit_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<&(f64, f64)> = points.iter().filter(|(_, y)| y.is_finite()).collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

fn normalized_random(grid: Grid, seed: u64) -> Result<SampledFunction> {
    let kind = if seed & 1 == 0 {
        Smoothness::RoughIndicator
    } else {
        Smoothness::BumpSum
    };
    let f = random_test_function(grid, seed, kind, &grid.full_region(), 1.0)?;
    let norm = lp_norm(&f, 2.0, None)?;
    Ok(if norm > 0.0 { f.scaled(1.0 / norm) } else { f })
}

/// For each `j`, running max over seeded `L^2`-normalized pairs `(f, g)` of
/// `‖T_j(f, g)‖_{L^1}` on an ambient grid of `cells` unit cells.
pub fn estimate_piece_decay(
    omega: &OmegaSpec,
    j_range: RangeInclusive<i32>,
    cells: usize,
    trials: usize,
    seed: u64,
) -> Result<DecayReport> {
    if trials == 0 {
        return domain("need at least one trial");
    }
    let n = 2 * cells.next_power_of_two();
    let decomposition = LpDecomposition::new(omega, n, 1.0, None)?;
    let grid = Grid::line(cells as f64 / 2.0, cells)?;
    let inputs: Vec<(SampledFunction, SampledFunction)> = (0..trials as u64)
        .map(|t| {
            let ts = derive_seed(seed, t);
            Ok((
                normalized_random(grid, derive_seed(ts, 1))?,
                normalized_random(grid, derive_seed(ts, 2))?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut estimates = Vec::new();
    for j in j_range {
        let piece = decomposition.piece(j);
        let mut run = 0.0f64;
        let mut seq = Vec::with_capacity(trials);
        for (f, g) in &inputs {
            let t = apply_piece(&piece, f, g)?;
            run = run.max(lp_norm(&t, 1.0, None)?);
            seq.push(run);
        }
        estimates.push((j, seq));
    }
    let side = |keep: fn(i32) -> bool| {
        let pts: Vec<(f64, f64)> = estimates
            .iter()
            .filter(|(j, _)| keep(*j))
            .map(|(j, v)| (f64::from(*j), v.last().copied().unwrap_or(0.0).log2()))
            .collect();
        fit_slope(&pts)
    };
    let iw = decomposition.i_window();
    Ok(DecayReport {
        slope_nonnegative_j: side(|j| j >= 0),
        slope_nonpositive_j: side(|j| j <= 0),
        estimates,
        i_window: (*iw.start(), *iw.end()),
        trials,
        seed,
    })
}

/// Running max, over seeded admissible pairs, of
/// `|K(x) - K(x')| D^{2+η} / |x - x'|^η`, where the piece is read as the
/// three-point kernel `K(x1, x2, x3) = K_j(x3 - x1, x3 - x2)`, `D` is the
/// largest distance between the points, and one point moves by at most a
/// third of its summed distance to the other two. Entry `t` is the maximum
/// after `t + 1` samples.
pub fn estimate_piece_smoothness(
    piece: &LpKernelPiece,
    eta: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(eta > 0.0 && eta < 1.0) {
        return domain(format!("eta must lie in (0, 1), got {eta}"));
    }
    let n = piece.field.n() as i64;
    let reach = n / 4;
    let h = piece.field.step();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = 0.0f64;
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        // points x1, x2 relative to x3 = 0
        let p = [
            rng.gen_range(-reach..reach),
            rng.gen_range(-reach..reach),
            0i64,
        ];
        let moved = rng.gen_range(0..3usize);
        let dist = |a: i64, b: i64| (a - b).abs() as f64 * h;
        let others: f64 = (0..3)
            .filter(|&k| k != moved)
            .map(|k| dist(p[moved], p[k]))
            .sum();
        let bound = (others / 3.0 / h).floor() as i64;
        if bound >= 1 {
            let delta = rng.gen_range(1..=bound) * if rng.gen_bool(0.5) { 1 } else { -1 };
            let mut q = p;
            q[moved] += delta;
            let kval = |x: [i64; 3]| piece.field.at(x[2] - x[0], x[2] - x[1]);
            let diam = |x: [i64; 3]| dist(x[0], x[1]).max(dist(x[0], x[2])).max(dist(x[1], x[2]));
            let d = diam(p);
            if d > 0.0 {
                let r = (kval(p) - kval(q)).abs() * d.powf(2.0 + eta)
                    / (delta.abs() as f64 * h).powf(eta);
                run = run.max(r);
            }
        }
        out.push(run);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    #[test]
    fn annular_partition_telescopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let r: f64 = 2f64.powf(rng.gen_range(-5.0..5.0));
            let t: f64 = rng.gen_range(0.0..TAU);
            let z = [r * t.cos(), r * t.sin()];
            let sum: f64 = (-10..10).map(|i| annular_weight(i, z)).sum();
            assert!((sum - 1.0).abs() <= 1e-10);
            for i in -3..3 {
                if r <= 2f64.powi(i - 1) || r >= 2f64.powi(i + 1) {
                    assert_eq!(annular_weight(i, z), 0.0);
                }
            }
        }
    }

    #[test]
    fn projection_basics() {
        let n = 64;
        let c = PeriodicField::new(n, 1.0, vec![2.5; n * n]).unwrap();
        for j in resolvable_bands(n, 1.0) {
            assert!(lp_projection(&c, j).unwrap().sup_norm() < 1e-12);
        }
        assert!(PeriodicField::new(48, 1.0, vec![0.0; 48 * 48]).is_err());

        // wave at |ξ| = 2^{j-1}, where the band multiplier equals 1
        let j = -3;
        let k = (2f64.powi(j - 1) * n as f64) as i64;
        let wave =
            PeriodicField::from_fn(n, 1.0, |z| (TAU * k as f64 * z[0] / n as f64).cos()).unwrap();
        let out = lp_projection(&wave, j).unwrap();
        for (a, b) in out.values().iter().zip(wave.values()) {
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn projections_reconstruct() {
        let n = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = PeriodicField::new(
            n,
            0.5,
            (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut total = vec![f.mean(); n * n];
        for j in resolvable_bands(n, 0.5) {
            for (t, v) in total.iter_mut().zip(lp_projection(&f, j).unwrap().values()) {
                *t += v;
            }
        }
        for (a, b) in total.iter().zip(f.values()) {
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn pieces_sum_to_partial_kernel() {
        let n = 64;
        let om = OmegaSpec::commutator();
        let zero = build_kernel_piece(&OmegaSpec::zero(), n, 1.0, 0, None).unwrap();
        assert_eq!(zero.field.sup_norm(), 0.0);
        let dec = LpDecomposition::new(&om, n, 1.0, None).unwrap();
        let target = dec.partial_kernel();
        let mut total = vec![target.mean(); n * n];
        let bands = resolvable_bands(n, 1.0);
        let iw = dec.i_window();
        for j in (bands.start() + iw.start())..=(bands.end() + iw.end()) {
            let p = dec.piece(j);
            assert!(p.imag_residue <= 1e-10);
            for (t, v) in total.iter_mut().zip(p.field.values()) {
                *t += v;
            }
        }
        let scale = target.sup_norm();
        for (a, b) in total.iter().zip(target.values()) {
            assert!((a - b).abs() <= 1e-6 * scale);
        }
        // and the partial kernel is K times Σβ_i on the grid
        let direct = PeriodicField::from_fn(n, 1.0, |z| {
            let w: f64 = iw.clone().map(|i| annular_weight(i, z)).sum();
            if w == 0.0 {
                0.0
            } else {
                w * kernel_eval(&om, z).unwrap()
            }
        })
        .unwrap();
        for (a, b) in direct.values().iter().zip(target.values()) {
            assert!((a - b).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn decay_trivial_cases() {
        let r = estimate_piece_decay(&OmegaSpec::zero(), -1..=1, 16, 3, 5).unwrap();
        assert!(r.estimates.iter().all(|(_, v)| v.iter().all(|&x| x == 0.0)));
        let r = estimate_piece_decay(&OmegaSpec::commutator(), -1..=1, 16, 4, 5).unwrap();
        for (_, v) in &r.estimates {
            assert!(v.windows(2).all(|p| p[1] >= p[0]));
        }
    }

    #[test]
    fn smoothness_running_max() {
        let zero = build_kernel_piece(&OmegaSpec::zero(), 64, 1.0, 0, None).unwrap();
        assert!(estimate_piece_smoothness(&zero, 0.5, 100, 1)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let p = build_kernel_piece(&OmegaSpec::commutator(), 64, 1.0, 1, None).unwrap();
        let s = estimate_piece_smoothness(&p, 0.5, 500, 1).unwrap();
        assert!(s.windows(2).all(|w| w[1] >= w[0]));
        assert!(*s.last().unwrap() > 0.0);
    }

    #[test]
    fn slope_fit() {
        let pts: Vec<(f64, f64)> = (0..5).map(|j| (j as f64, 3.0 - 0.5 * j as f64)).collect();
        assert!((fit_slope(&pts).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(fit_slope(&[(1.0, 2.0)]), None);
    }
}
