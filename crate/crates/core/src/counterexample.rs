//! One-dimensional two-prototype K-means configuration on a density that is
//! uniform on `[λ, β]` and zero below `λ`.
//!
//! With the origin at the midpoint of `w1 < 0 < w2 = −w1` and `w1` moved by
//! `ζ₁ ∈ (0, η)`, the tube around the Voronoï boundary is the strip of
//! half-width `η/2` around the bisector, with points
//! `P1 = −η/2, P2 = P1 + ζ₁/2, P3 = ζ₁/2, P4 = η/2, P5 = P4 + ζ₁/2`.
//! The change of the tube energy `Δ(ζ₁)` is a different cubic on either side
//! of `ζ₁ = 2λ`, with different linear coefficients, so the K-means energy is
//! not differentiable here.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::Density;
use crate::error::{Error, Result};
use crate::geometry::{lowest_index_min, order_signature, PrototypeSet};
use crate::integrator::{refined_1d, Integrand};

/// Minimum number of panels accepted by [`delta_numeric`].
pub const MIN_PANELS: usize = 10_000;

/// Required `β/η`; the support must extend far beyond the tube.
pub const MIN_BETA_OVER_ETA: f64 = 20.0;

/// Points a side needs for a slope fit.
pub const MIN_SIDE_POINTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleConfig {
    w1: f64,
    w2: f64,
    eta: f64,
    lambda: f64,
    beta: f64,
}

impl CounterexampleConfig {
    pub fn new(w1: f64, w2: f64, eta: f64, lambda: f64, beta: f64) -> Result<Self> {
        let cfg = CounterexampleConfig {
            w1,
            w2,
            eta,
            lambda,
            beta,
        };
        cfg.validate_at("counterexample")?;
        Ok(cfg)
    }

    /// Checks the invariants; `prefix` is the config path used in diagnostics.
    pub fn validate_at(&self, prefix: &str) -> Result<()> {
        let field = |f: &str| format!("{prefix}.{f}");
        for (name, x) in [
            ("w1", self.w1),
            ("w2", self.w2),
            ("eta", self.eta),
            ("lambda", self.lambda),
            ("beta", self.beta),
        ] {
            if !x.is_finite() {
                return Err(Error::param(field(name), format!("must be finite, got {x}")));
            }
        }
        if self.w1 >= 0.0 {
            return Err(Error::param(field("w1"), format!("must be < 0, got {}", self.w1)));
        }
        if self.w2 != -self.w1 {
            return Err(Error::param(
                field("w2"),
                format!("must equal −w1 = {} (origin at the midpoint), got {}", -self.w1, self.w2),
            ));
        }
        if self.eta <= 0.0 {
            return Err(Error::param(field("eta"), format!("must be > 0, got {}", self.eta)));
        }
        if !(0.0..=self.eta / 2.0).contains(&self.lambda) {
            return Err(Error::param(
                field("lambda"),
                format!("must lie in [0, η/2] = [0, {}], got {}", self.eta / 2.0, self.lambda),
            ));
        }
        if self.beta < MIN_BETA_OVER_ETA * self.eta {
            return Err(Error::param(
                field("beta"),
                format!("must be ≥ {MIN_BETA_OVER_ETA}η = {}, got {}", MIN_BETA_OVER_ETA * self.eta, self.beta),
            ));
        }
        Ok(())
    }

    pub fn w1(&self) -> f64 {
        self.w1
    }

    pub fn w2(&self) -> f64 {
        self.w2
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Density height `p = 1/(β − λ)`.
    pub fn p(&self) -> f64 {
        1.0 / (self.beta - self.lambda)
    }

    pub fn density(&self) -> Density {
        Density::uniform_interval(self.lambda, self.beta).expect("validated λ < β")
    }

    /// Where the two branches of `Δ` meet.
    pub fn break_point(&self) -> f64 {
        2.0 * self.lambda
    }

    /// `[P1, P2, P3, P4, P5]` for the given `ζ₁`.
    pub fn boundary_points(&self, zeta1: f64) -> [f64; 5] {
        let h = self.eta / 2.0;
        [-h, -h + zeta1 / 2.0, zeta1 / 2.0, h, h + zeta1 / 2.0]
    }

    /// Slope on the `ζ₁ > 2λ` side as stated in closed form,
    /// `(p/4)[2(w1 − λ)² + (w2 − η/2)² − (w1² + w2²)]`.
    pub fn l1_paper(&self) -> f64 {
        let (w1, w2) = (self.w1, self.w2);
        self.p() / 4.0
            * (2.0 * (w1 - self.lambda).powi(2) + (w2 - self.eta / 2.0).powi(2) - (w1 * w1 + w2 * w2))
    }

    /// Slope on the `ζ₁ ≤ 2λ` side, `(p/4)(w2 − η/2)²`.
    pub fn l2_paper(&self) -> f64 {
        self.p() / 4.0 * (self.w2 - self.eta / 2.0).powi(2)
    }

    /// `ζ₁`-independent term of the expansion on the `ζ₁ > 2λ` side,
    /// `(p/6)[(λ − w2)³ − (λ − w1)³ + w2³ − w1³]`.
    pub fn expansion_constant(&self) -> f64 {
        let (w1, w2, l) = (self.w1, self.w2, self.lambda);
        self.p() / 6.0 * ((l - w2).powi(3) - (l - w1).powi(3) + w2.powi(3) - w1.powi(3))
    }

    fn check_zeta(&self, zeta1: f64) -> Result<()> {
        if zeta1 > 0.0 && zeta1 < self.eta {
            Ok(())
        } else {
            Err(Error::param("zeta1", format!("must lie in (0, η) = (0, {}), got {zeta1}", self.eta)))
        }
    }

    /// `1` for `ζ₁ > 2λ`, `2` for `ζ₁ ≤ 2λ`.
    pub fn branch(&self, zeta1: f64) -> u8 {
        if zeta1 > self.break_point() {
            1
        } else {
            2
        }
    }
}

/// `∫_a^b (v − c)² dv`.
fn square_integral(a: f64, b: f64, c: f64) -> f64 {
    ((b - c).powi(3) - (a - c).powi(3)) / 3.0
}

/// `Δ(ζ₁)` from exact antiderivatives of the unexpanded integrands.
pub fn delta_analytic(cfg: &CounterexampleConfig, zeta1: f64) -> Result<f64> {
    cfg.check_zeta(zeta1)?;
    let [_, _, p3, p4, p5] = cfg.boundary_points(zeta1);
    let half_p = cfg.p() / 2.0;
    let mut delta = half_p * square_integral(p4, p5, cfg.w2);
    if zeta1 > cfg.break_point() {
        let moved = cfg.w1 + zeta1;
        delta += half_p
            * (square_integral(cfg.lambda, p3, moved) - square_integral(cfg.lambda, p3, cfg.w2));
    }
    Ok(delta)
}

/// First-order expansion: `C + L1 ζ₁` above `2λ`, `L2 ζ₁` below.
pub fn delta_expanded(cfg: &CounterexampleConfig, zeta1: f64) -> Result<f64> {
    cfg.check_zeta(zeta1)?;
    Ok(match cfg.branch(zeta1) {
        1 => cfg.expansion_constant() + cfg.l1_paper() * zeta1,
        _ => cfg.l2_paper() * zeta1,
    })
}

fn strip(v: f64, w: &PrototypeSet, half_width: f64) -> bool {
    let mid = 0.5 * (w.point(0)[0] + w.point(1)[0]);
    (v - mid).abs() <= half_width
}

#[derive(Default)]
struct DeltaScratch {
    squared: Vec<f64>,
}

impl DeltaScratch {
    fn tube_energy(&mut self, w: &PrototypeSet, v: f64, half_width: f64) -> f64 {
        if !strip(v, w, half_width) {
            return 0.0;
        }
        self.squared.resize(2, 0.0);
        w.squared_distances_into(&[v], &mut self.squared);
        // K-means: only the selected winner A_p contributes
        0.5 * self.squared[lowest_index_min(&self.squared)]
    }
}

struct DeltaIntegrand {
    base: PrototypeSet,
    moved: PrototypeSet,
    half_width: f64,
}

impl Integrand for DeltaIntegrand {
    type Scratch = DeltaScratch;

    fn width(&self) -> usize {
        1
    }

    fn eval(&self, v: &[f64], out: &mut [f64], s: &mut DeltaScratch) {
        out[0] = s.tube_energy(&self.moved, v[0], self.half_width)
            - s.tube_energy(&self.base, v[0], self.half_width);
    }

    fn signature(&self, v: &[f64], s: &mut DeltaScratch) -> u64 {
        s.squared.resize(2, 0.0);
        let mut sig = 0u64;
        for (k, w) in [&self.base, &self.moved].into_iter().enumerate() {
            w.squared_distances_into(v, &mut s.squared);
            let bits = order_signature(&s.squared) ^ strip(v[0], w, self.half_width) as u64;
            sig ^= bits.rotate_left(17 * k as u32);
        }
        sig
    }
}

/// Brute-force quadrature of `Δ(ζ₁)` on the configuration's own density.
///
/// The winner at every node is the lowest-index nearest prototype.
pub fn delta_numeric(cfg: &CounterexampleConfig, zeta1: f64, panels: usize) -> Result<f64> {
    delta_numeric_with(cfg, &cfg.density(), zeta1, panels)
}

/// As [`delta_numeric`] against any one-dimensional density.
pub fn delta_numeric_with(
    cfg: &CounterexampleConfig,
    density: &Density,
    zeta1: f64,
    panels: usize,
) -> Result<f64> {
    cfg.check_zeta(zeta1)?;
    if panels < MIN_PANELS {
        return Err(Error::param("counterexample.panels", format!("must be ≥ {MIN_PANELS}, got {panels}")));
    }
    if density.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: density.dim(),
        });
    }
    let f = DeltaIntegrand {
        base: PrototypeSet::scalars(&[cfg.w1, cfg.w2])?,
        moved: PrototypeSet::scalars(&[cfg.w1 + zeta1, cfg.w2])?,
        half_width: cfg.eta / 2.0,
    };
    // the integrand vanishes outside [P1, P5]; widen slightly so the strip
    // edges are interior points of the window
    let [p1, _, _, _, p5] = cfg.boundary_points(zeta1);
    let pad = 1e-3 * cfg.eta;
    let b = density.support_bounds();
    let (lo, hi) = ((p1 - pad).max(b.lo[0]), (p5 + pad).min(b.hi[0]));
    if lo >= hi {
        return Ok(0.0);
    }
    Ok(refined_1d(density, lo, hi, panels, &f)[0])
}

/// One grid point of a counterexample scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaRow {
    pub zeta1: f64,
    pub delta_analytic: f64,
    pub delta_numeric: f64,
    pub branch: u8,
}

pub fn delta_scan(cfg: &CounterexampleConfig, grid: &[f64], panels: usize) -> Result<Vec<DeltaRow>> {
    grid.par_iter()
        .map(|&z| {
            Ok(DeltaRow {
                zeta1: z,
                delta_analytic: delta_analytic(cfg, z)?,
                delta_numeric: delta_numeric(cfg, z, panels)?,
                branch: cfg.branch(z),
            })
        })
        .collect()
}

/// Least-squares cubic through one side of the break.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BranchFit {
    /// `Δ` extrapolated to `ζ₁ = 0` along this branch.
    pub intercept: f64,
    pub slope: f64,
    pub slope_stderr: f64,
    pub points: usize,
    pub rss: f64,
}

const FIT_DEGREE: usize = 3;

/// Fits `Δ = c₀ + c₁ζ + c₂ζ² + c₃ζ³`; the limit of `(Δ − c₀)/ζ` is `c₁`.
pub fn fit_branch(points: &[(f64, f64)]) -> Result<BranchFit> {
    let m = points.len();
    let k = FIT_DEGREE + 1;
    if m < MIN_SIDE_POINTS.max(k + 1) {
        return Err(Error::DegenerateGrid(format!(
            "a branch fit needs at least {} points, got {m}",
            MIN_SIDE_POINTS.max(k + 1)
        )));
    }
    let x = DMatrix::from_fn(m, k, |i, j| points[i].0.powi(j as i32));
    let y = DVector::from_iterator(m, points.iter().map(|p| p.1));
    let qr = x.clone().qr();
    let r = qr.r();
    let rinv = r
        .try_inverse()
        .ok_or_else(|| Error::DegenerateGrid("branch grid points are not distinct enough".into()))?;
    let coef = &rinv * (qr.q().transpose() * &y);
    let resid = &y - &x * &coef;
    let rss = resid.norm_squared();
    let s2 = rss / (m - k) as f64;
    let cov11 = (rinv.row(1) * rinv.row(1).transpose())[(0, 0)];
    Ok(BranchFit {
        intercept: coef[0],
        slope: coef[1],
        slope_stderr: (s2 * cov11).sqrt(),
        points: m,
        rss,
    })
}

/// Fitted and closed-form slopes on both sides of `ζ₁ = 2λ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlopeBreak {
    /// Fit above the break (`ζ₁ > 2λ`), absent when no grid point is above.
    pub upper: Option<BranchFit>,
    /// Fit at and below the break.
    pub lower: Option<BranchFit>,
    pub l1_paper: f64,
    pub l2_paper: f64,
    pub distinct: bool,
    /// `(ζ₁, Δ)` pairs the fits were made from, sorted by `ζ₁`.
    pub samples: Vec<(f64, f64)>,
}

impl SlopeBreak {
    pub fn l1_hat(&self) -> Option<f64> {
        self.upper.map(|f| f.slope)
    }

    pub fn l2_hat(&self) -> Option<f64> {
        self.lower.map(|f| f.slope)
    }
}

fn check_grid(cfg: &CounterexampleConfig, grid: &[f64]) -> Result<()> {
    for (i, z) in grid.iter().enumerate() {
        if !(*z > 0.0 && *z < cfg.eta) {
            return Err(Error::DegenerateGrid(format!("zeta1[{i}] = {z} is outside (0, η)")));
        }
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|p| p[0] == p[1]) {
        return Err(Error::DegenerateGrid("zeta1 grid contains duplicates".into()));
    }
    Ok(())
}

/// Splits `(ζ₁, Δ)` samples at `split` and fits each side.
///
/// A side with no points is reported as absent; a side with too few points
/// is an error. `distinct` requires both sides and a slope difference above
/// five combined standard errors.
pub fn slope_break_at(
    cfg: &CounterexampleConfig,
    samples: &[(f64, f64)],
    split: f64,
) -> Result<SlopeBreak> {
    let (lower, upper): (Vec<_>, Vec<_>) = samples.iter().partition(|(z, _)| *z <= split);
    let fit = |side: &[(f64, f64)]| {
        if side.is_empty() {
            Ok(None)
        } else {
            fit_branch(side).map(Some)
        }
    };
    let (lower, upper) = (fit(&lower)?, fit(&upper)?);
    if lower.is_none() && upper.is_none() {
        return Err(Error::DegenerateGrid("empty zeta1 grid".into()));
    }
    let distinct = match (upper, lower) {
        (Some(u), Some(l)) => {
            let se = u.slope_stderr.hypot(l.slope_stderr);
            (u.slope - l.slope).abs() > 5.0 * se
        }
        _ => false,
    };
    let mut samples = samples.to_vec();
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(SlopeBreak {
        upper,
        lower,
        l1_paper: cfg.l1_paper(),
        l2_paper: cfg.l2_paper(),
        distinct,
        samples,
    })
}

/// Evaluates `Δ` by quadrature on the grid and fits both branches.
///
/// When `2λ` lies inside `(0, η)` the grid must put at least
/// [`MIN_SIDE_POINTS`] points strictly on each side of it.
pub fn slope_break(cfg: &CounterexampleConfig, grid: &[f64], panels: usize) -> Result<SlopeBreak> {
    check_grid(cfg, grid)?;
    let split = cfg.break_point();
    if split > 0.0 && split < cfg.eta {
        let below = grid.iter().filter(|z| **z < split).count();
        let above = grid.iter().filter(|z| **z > split).count();
        if below < MIN_SIDE_POINTS || above < MIN_SIDE_POINTS {
            return Err(Error::DegenerateGrid(format!(
                "need ≥ {MIN_SIDE_POINTS} points on each side of 2λ = {split}, got {below} below and {above} above"
            )));
        }
    }
    let samples = grid
        .par_iter()
        .map(|&z| Ok((z, delta_numeric(cfg, z, panels)?)))
        .collect::<Result<Vec<_>>>()?;
    slope_break_at(cfg, &samples, split)
}

/// Split of a sorted `(ζ₁, Δ)` sample minimizing the total residual of the
/// two branch fits, returned as the midpoint between neighbouring grid points.
pub fn locate_break(samples: &[(f64, f64)]) -> Result<f64> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let need = MIN_SIDE_POINTS.max(FIT_DEGREE + 2);
    if sorted.len() < 2 * need {
        return Err(Error::DegenerateGrid(format!(
            "break location needs at least {} points, got {}",
            2 * need,
            sorted.len()
        )));
    }
    let mut best: Option<(f64, f64)> = None;
    for k in need..=(sorted.len() - need) {
        let rss = fit_branch(&sorted[..k])?.rss + fit_branch(&sorted[k..])?.rss;
        if best.is_none_or(|(r, _)| rss < r) {
            best = Some((rss, 0.5 * (sorted[k - 1].0 + sorted[k].0)));
        }
    }
    Ok(best.expect("at least one split").1)
}
