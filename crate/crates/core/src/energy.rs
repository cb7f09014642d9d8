//! Energy `E_V(w) = ∫ ½ Σ_p P(v) ψ_p(w, v) ‖v − w_p‖² dv`, its restriction
//! `E_V^η` to the cellular manifold, and the probes that exercise the
//! pseudo-potential argument numerically.
//!
//! Every paired quantity (energy vs cellular energy, the rows of a gap scan,
//! the ± sides of a finite difference) is computed from one integrator, so
//! Monte-Carlo comparisons always use common random numbers.

use crate::density::{Density, SeededStream};
use crate::error::{Error, Result};
use crate::geometry::{self, heaviside_matrix, CellularParams, PrototypeSet};
use crate::integrator::{integrate, Integrand, Integrator};
use crate::neighborhoods::{psi_all_from_squared, NeighborhoodSpec, Scratch};

/// One integral estimate with its Monte-Carlo standard error (0 for quadrature).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// Energy, cellular energy and tube mass at one `η`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyReport {
    pub eta: f64,
    pub theta: f64,
    pub energy: f64,
    pub cellular_energy: f64,
    /// `energy − cellular_energy`.
    pub gap: f64,
    /// Probability mass of `V \ V^η`.
    pub tube_mass: f64,
    pub stderr_energy: f64,
    pub stderr_cellular: f64,
    pub stderr_gap: f64,
    pub stderr_tube: f64,
}

#[derive(Default)]
struct EvalScratch {
    squared: Vec<f64>,
    psi: Vec<f64>,
    nb: Scratch,
}

impl EvalScratch {
    fn load(&mut self, w: &PrototypeSet, v: &[f64]) {
        let n = w.n();
        self.squared.resize(n, 0.0);
        self.psi.resize(n, 0.0);
        w.squared_distances_into(v, &mut self.squared);
    }

    fn load_psi(&mut self, w: &PrototypeSet, spec: &NeighborhoodSpec, v: &[f64]) {
        self.load(w, v);
        psi_all_from_squared(spec, &self.squared, &mut self.psi, &mut self.nb);
    }

    fn energy(&self) -> f64 {
        0.5 * self
            .psi
            .iter()
            .zip(&self.squared)
            .map(|(p, d)| p * d)
            .sum::<f64>()
    }

    fn min_gap(&self) -> Option<f64> {
        geometry::min_gap(&self.squared, geometry::lowest_index_min(&self.squared))
    }
}

/// Number of thresholds (sorted descending) whose tube contains the datum.
/// Tubes are nested, so this count determines every indicator.
fn tube_depth(min_gap: Option<f64>, thetas: &[f64]) -> usize {
    match min_gap {
        None => 0,
        Some(g) => thetas.iter().take_while(|t| g <= **t).count(),
    }
}

/// Components `[F, then per θ: F·cell, F·tube, tube]`.
struct EnergyIntegrand<'a> {
    w: &'a PrototypeSet,
    spec: &'a NeighborhoodSpec,
    thetas: &'a [f64],
}

impl Integrand for EnergyIntegrand<'_> {
    type Scratch = EvalScratch;

    fn width(&self) -> usize {
        1 + 3 * self.thetas.len()
    }

    fn eval(&self, v: &[f64], out: &mut [f64], s: &mut EvalScratch) {
        s.load_psi(self.w, self.spec, v);
        let f = s.energy();
        let depth = tube_depth(s.min_gap(), self.thetas);
        out[0] = f;
        for i in 0..self.thetas.len() {
            let tube = (i < depth) as u8 as f64;
            out[1 + 3 * i] = f * (1.0 - tube);
            out[2 + 3 * i] = f * tube;
            out[3 + 3 * i] = tube;
        }
    }

    fn signature(&self, v: &[f64], s: &mut EvalScratch) -> u64 {
        s.load(self.w, v);
        geometry::order_signature(&s.squared) ^ (tube_depth(s.min_gap(), self.thetas) as u64) << 56
    }
}

/// `ψ_j (w_j − v)`, optionally zeroed on the tube.
struct GradientIntegrand<'a> {
    w: &'a PrototypeSet,
    spec: &'a NeighborhoodSpec,
    j: usize,
    theta: Option<f64>,
}

impl Integrand for GradientIntegrand<'_> {
    type Scratch = EvalScratch;

    fn width(&self) -> usize {
        self.w.dim()
    }

    fn eval(&self, v: &[f64], out: &mut [f64], s: &mut EvalScratch) {
        s.load_psi(self.w, self.spec, v);
        let keep = match self.theta {
            Some(t) => tube_depth(s.min_gap(), &[t]) == 0,
            None => true,
        };
        let weight = if keep { s.psi[self.j] } else { 0.0 };
        for (o, (wj, x)) in out.iter_mut().zip(self.w.point(self.j).iter().zip(v)) {
            *o = weight * (wj - x);
        }
    }

    fn signature(&self, v: &[f64], s: &mut EvalScratch) -> u64 {
        s.load(self.w, v);
        let depth = self.theta.map_or(0, |t| tube_depth(s.min_gap(), &[t]));
        geometry::order_signature(&s.squared) ^ (depth as u64) << 56
    }
}

fn check_inputs(density: &Density, w: &PrototypeSet, spec: &NeighborhoodSpec) -> Result<()> {
    if density.dim() != w.dim() {
        return Err(Error::DimensionMismatch {
            expected: density.dim(),
            got: w.dim(),
        });
    }
    spec.validate(w.n())
}

/// `½ Σ_p ψ_p(w, v) ‖v − w_p‖²`, the energy integrand without the density.
pub fn per_sample_energy(w: &PrototypeSet, v: &[f64], spec: &NeighborhoodSpec) -> Result<f64> {
    w.check_point(v)?;
    spec.validate(w.n())?;
    let mut s = EvalScratch::default();
    s.load_psi(w, spec, v);
    Ok(s.energy())
}

pub fn estimate_energy(
    density: &Density,
    w: &PrototypeSet,
    spec: &NeighborhoodSpec,
    integ: &Integrator,
) -> Result<Estimate> {
    check_inputs(density, w, spec)?;
    let got = integrate(density, integ, &EnergyIntegrand { w, spec, thetas: &[] })?;
    Ok(Estimate {
        value: got.values[0],
        stderr: got.stderr[0],
    })
}

/// `E_V^η`: the same integral with tube points contributing nothing.
pub fn estimate_energy_cellular(
    density: &Density,
    w: &PrototypeSet,
    spec: &NeighborhoodSpec,
    cp: &CellularParams,
    integ: &Integrator,
) -> Result<Estimate> {
    let report = energy_report(density, w, spec, cp, integ)?;
    Ok(Estimate {
        value: report.cellular_energy,
        stderr: report.stderr_cellular,
    })
}

pub fn energy_report(
    density: &Density,
    w: &PrototypeSet,
    spec: &NeighborhoodSpec,
    cp: &CellularParams,
    integ: &Integrator,
) -> Result<EnergyReport> {
    Ok(scan_thetas(density, w, spec, &[(cp.eta(), cp.theta())], integ)?[0])
}

fn scan_thetas(
    density: &Density,
    w: &PrototypeSet,
    spec: &NeighborhoodSpec,
    levels: &[(f64, f64)],
    integ: &Integrator,
) -> Result<Vec<EnergyReport>> {
    check_inputs(density, w, spec)?;
    let thetas: Vec<f64> = levels.iter().map(|l| l.1).collect();
    let got = integrate(density, integ, &EnergyIntegrand { w, spec, thetas: &thetas })?;
    let energy = got.values[0];
    Ok(levels
        .iter()
        .enumerate()
        .map(|(i, &(eta, theta))| {
            let cellular = got.values[1 + 3 * i];
            EnergyReport {
                eta,
                theta,
                energy,
                cellular_energy: cellular,
                gap: energy - cellular,
                tube_mass: got.values[3 + 3 * i],
                stderr_energy: got.stderr[0],
                stderr_cellular: got.stderr[1 + 3 * i],
                stderr_gap: got.stderr[2 + 3 * i],
                stderr_tube: got.stderr[3 + 3 * i],
            }
        })
        .collect())
}

/// Gap and tube mass for each `η` (strictly descending), on shared samples.
pub fn energy_gap_scan(
    density: &Density,
    w: &PrototypeSet,
    spec: &NeighborhoodSpec,
    etas: &[f64],
    integ: &Integrator,
) -> Result<Vec<EnergyReport>> {
    if etas.is_empty() {
        return Err(Error::param("scan.etas", "need at least one value"));
    }
    for (i, e) in etas.iter().enumerate() {
        if !(e.is_finite() && *e > 0.0) {
            return Err(Error::param(format!("scan.etas[{i}]"), format!("must be > 0, got {e}")));
        }
    }
    if etas.windows(2).any(|p| p[1] >= p[0]) {
        return Err(Error::param("scan.etas", "must be strictly descending"));
    }
    let levels: Vec<(f64, f64)> = etas.iter().map(|e| (*e, e * e)).collect();
    scan_thetas(density, w, spec, &levels, integ)
}

/// Largest gap over a set of prototype configurations, per `η`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupGap {
    pub eta: f64,
    pub theta: f64,
    pub max_gap: f64,
    /// Index of the configuration attaining `max_gap`.
    pub argmax: usize,
}

/// Probes `sup_w (E_V − E_V^η)(w)` on a finite set of configurations.
pub fn sup_gap_scan(
    density: &Density,
    configs: &[PrototypeSet],
    spec: &NeighborhoodSpec,
    etas: &[f64],
    integ: &Integrator,
) -> Result<Vec<SupGap>> {
    if configs.is_empty() {
        return Err(Error::param("scan.configurations", "need at least one configuration"));
    }
    let scans = configs
        .iter()
        .map(|w| energy_gap_scan(density, w, spec, etas, integ))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..etas.len())
        .map(|i| {
            let (argmax, best) = scans
                .iter()
                .enumerate()
                .map(|(c, rows)| (c, rows[i]))
                .fold((0, scans[0][i]), |acc, cur| if cur.1.gap > acc.1.gap { cur } else { acc });
            SupGap {
                eta: best.eta,
                theta: best.theta,
                max_gap: best.gap,
                argmax,
            }
        })
        .collect())
}

/// `∫ P(v) ψ_j(w, v) (w_j − v) dv`, over `V^η(w)` when `cellular` is given.
pub fn analytic_gradient(
    density: &Density,
    w: &PrototypeSet,
    spec: &NeighborhoodSpec,
    j: usize,
    cellular: Option<&CellularParams>,
    integ: &Integrator,
) -> Result<Vec<f64>> {
    check_inputs(density, w, spec)?;
    w.check_index(j)?;
    let f = GradientIntegrand {
        w,
        spec,
        j,
        theta: cellular.map(CellularParams::theta),
    };
    Ok(integrate(density, integ, &f)?.values)
}

/// Central differences of `E_V^η` in the coordinates of `w_j`.
///
/// The step must stay below `ν`, inside which every Heaviside comparison on
/// `V^η` is frozen.
pub fn finite_diff_gradient(
    density: &Density,
    w: &PrototypeSet,
    spec: &NeighborhoodSpec,
    cp: &CellularParams,
    j: usize,
    h: f64,
    integ: &Integrator,
) -> Result<Vec<f64>> {
    check_inputs(density, w, spec)?;
    w.check_index(j)?;
    if !(h > 0.0) {
        return Err(Error::param("gradient.h", format!("must be > 0, got {h}")));
    }
    if h >= cp.nu() {
        return Err(Error::ContractViolation(format!(
            "finite-difference step {h} is not below the perturbation bound ν = {}",
            cp.nu()
        )));
    }
    let d = w.dim();
    let mut grad = vec![0.0; d];
    for (k, g) in grad.iter_mut().enumerate() {
        let mut zeta = vec![0.0; w.n() * d];
        zeta[j * d + k] = h;
        let plus = estimate_energy_cellular(density, &w.perturbed(&zeta), spec, cp, integ)?;
        zeta[j * d + k] = -h;
        let minus = estimate_energy_cellular(density, &w.perturbed(&zeta), spec, cp, integ)?;
        *g = (plus.value - minus.value) / (2.0 * h);
    }
    Ok(grad)
}

/// Outcome of a Heaviside-invariance probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOutcome {
    pub trials: usize,
    /// Trials whose `n × n` Heaviside matrix changed under the perturbation.
    pub violations: usize,
    /// Largest `|ζ| = max_p ‖ζ_p‖` drawn.
    pub max_zeta: f64,
    /// Smallest `|ζ|` drawn.
    pub min_zeta: f64,
    pub nu: f64,
}

fn check_probe_inputs(density: &Density, w: &PrototypeSet, cp: &CellularParams) -> Result<()> {
    if density.dim() != w.dim() {
        return Err(Error::DimensionMismatch {
            expected: density.dim(),
            got: w.dim(),
        });
    }
    let bounds = density.support_bounds();
    for (p, x) in w.points().enumerate() {
        if !bounds.contains(x) {
            return Err(Error::param(
                format!("prototypes[{p}]"),
                "must lie inside the density's bounding box",
            ));
        }
    }
    if cp.delta() + 1e-12 < density.diameter() {
        return Err(Error::ContractViolation(format!(
            "ν was computed for δ = {} but the support has diameter {}",
            cp.delta(),
            density.diameter()
        )));
    }
    Ok(())
}

/// Smallest `|d_r² − d_p²|` over pairs `r ≠ p`; `None` for one prototype.
fn all_pairs_gap(squared: &[f64]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for r in 0..squared.len() {
        for p in (r + 1)..squared.len() {
            let g = (squared[r] - squared[p]).abs();
            best = Some(best.map_or(g, |b: f64| b.min(g)));
        }
    }
    best
}

/// Draws `v ~ P` by rejection, conditioned on every pair of squared
/// distances being more than `θ` apart. This subset of `V^η(w)` is where the
/// whole Heaviside matrix, not only the winner's comparisons, is controlled.
fn sample_separated(
    density: &Density,
    w: &PrototypeSet,
    cp: &CellularParams,
    stream: &mut SeededStream,
    squared: &mut [f64],
) -> Result<Vec<f64>> {
    const MAX_ATTEMPTS: usize = 100_000;
    for _ in 0..MAX_ATTEMPTS {
        let v = density.sample(stream);
        w.squared_distances_into(&v, squared);
        if all_pairs_gap(squared).is_none_or(|g| g > cp.theta()) {
            return Ok(v);
        }
    }
    Err(Error::ContractViolation(format!(
        "no separated point of V^η found in {MAX_ATTEMPTS} draws; η = {} is too large",
        cp.eta()
    )))
}

/// Point uniform in the open ball of the given radius.
fn uniform_in_ball(dim: usize, radius: f64, stream: &mut SeededStream) -> Vec<f64> {
    if radius == 0.0 {
        return vec![0.0; dim];
    }
    loop {
        let dir: Vec<f64> = (0..dim).map(|_| stream.standard_normal()).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let r = radius * stream.uniform().powf(1.0 / dim as f64);
        return dir.into_iter().map(|x| x * r / norm).collect();
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Draws `v` in `V^η(w)` with all pairs separated by `θ` and every `ζ_p`
/// uniformly in the open ball of radius `ν`, and counts trials where any
/// `H(d_r² − d_p²)` changes.
pub fn invariance_probe(
    density: &Density,
    w: &PrototypeSet,
    cp: &CellularParams,
    trials: usize,
    stream: &mut SeededStream,
) -> Result<ProbeOutcome> {
    invariance_probe_with_radius(density, w, cp, trials, cp.nu(), stream)
}

/// As [`invariance_probe`] with an arbitrary perturbation radius.
pub fn invariance_probe_with_radius(
    density: &Density,
    w: &PrototypeSet,
    cp: &CellularParams,
    trials: usize,
    radius: f64,
    stream: &mut SeededStream,
) -> Result<ProbeOutcome> {
    check_probe_inputs(density, w, cp)?;
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::param("invariance.radius", format!("must be ≥ 0, got {radius}")));
    }
    let (n, d) = (w.n(), w.dim());
    let mut before = vec![0.0; n];
    let mut after = vec![0.0; n];
    let mut outcome = ProbeOutcome {
        trials,
        violations: 0,
        max_zeta: 0.0,
        min_zeta: if trials == 0 { 0.0 } else { f64::INFINITY },
        nu: cp.nu(),
    };
    for _ in 0..trials {
        let v = sample_separated(density, w, cp, stream, &mut before)?;
        let mut zeta = Vec::with_capacity(n * d);
        let mut size: f64 = 0.0;
        for _ in 0..n {
            let z = uniform_in_ball(d, radius, stream);
            size = size.max(norm(&z));
            zeta.extend(z);
        }
        outcome.max_zeta = outcome.max_zeta.max(size);
        outcome.min_zeta = outcome.min_zeta.min(size);
        w.perturbed(&zeta).squared_distances_into(&v, &mut after);
        if heaviside_matrix(&before) != heaviside_matrix(&after) {
            outcome.violations += 1;
        }
    }
    Ok(outcome)
}

/// Adversarial counterpart: for each separated `v ∈ V^η(w)` the winner is pushed
/// straight away from `v` far enough to lose to the runner-up, with at least
/// `min_factor · ν` displacement.
pub fn adversarial_probe(
    density: &Density,
    w: &PrototypeSet,
    cp: &CellularParams,
    trials: usize,
    min_factor: f64,
    stream: &mut SeededStream,
) -> Result<ProbeOutcome> {
    check_probe_inputs(density, w, cp)?;
    if w.n() < 2 {
        return Err(Error::param("prototypes", "adversarial probe needs at least two prototypes"));
    }
    let (n, d) = (w.n(), w.dim());
    let mut before = vec![0.0; n];
    let mut after = vec![0.0; n];
    let mut outcome = ProbeOutcome {
        trials,
        violations: 0,
        max_zeta: 0.0,
        min_zeta: if trials == 0 { 0.0 } else { f64::INFINITY },
        nu: cp.nu(),
    };
    for _ in 0..trials {
        let v = sample_separated(density, w, cp, stream, &mut before)?;
        let p = geometry::lowest_index_min(&before);
        let runner = (0..n)
            .filter(|r| *r != p)
            .min_by(|a, b| before[*a].total_cmp(&before[*b]))
            .expect("n ≥ 2");
        let (dp, dr) = (before[p].sqrt(), before[runner].sqrt());
        let mut dir: Vec<f64> = w.point(p).iter().zip(&v).map(|(a, b)| a - b).collect();
        let len = norm(&dir);
        if len == 0.0 {
            dir = uniform_in_ball(d, 1.0, stream);
        }
        let len = norm(&dir);
        let push = (1.5 * (dr - dp)).max(min_factor * cp.nu());
        let mut zeta = vec![0.0; n * d];
        for k in 0..d {
            zeta[p * d + k] = dir[k] / len * push;
        }
        outcome.max_zeta = outcome.max_zeta.max(push);
        outcome.min_zeta = outcome.min_zeta.min(push);
        w.perturbed(&zeta).squared_distances_into(&v, &mut after);
        if heaviside_matrix(&before) != heaviside_matrix(&after) {
            outcome.violations += 1;
        }
    }
    Ok(outcome)
}
