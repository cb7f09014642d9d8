//! Online adaptation `Δw_p = α ψ_p(w, v) (v − w_p)` with a learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::density::{Density, SeededStream};
use crate::energy::estimate_energy;
use crate::error::{Error, Result};
use crate::geometry::PrototypeSet;
use crate::integrator::Integrator;
use crate::neighborhoods::{psi_all_from_squared, NeighborhoodSpec, Scratch};

/// Learning rate `α(t)`, non-increasing with values in `(0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant { alpha: f64 },
    /// Linear decay from `alpha0` to `alpha_final` over `steps`, then flat.
    Linear { alpha0: f64, alpha_final: f64, steps: u64 },
    /// `α(t) = α₀ τ / (τ + t)`.
    InverseTime { alpha0: f64, tau: f64 },
}

fn check_alpha(name: &str, a: f64) -> Result<()> {
    if a > 0.0 && a <= 1.0 {
        Ok(())
    } else {
        Err(Error::param(name, format!("must lie in (0, 1], got {a}")))
    }
}

impl Schedule {
    /// Checks parameters; `prefix` is the config path used in diagnostics.
    pub fn validate_at(&self, prefix: &str) -> Result<()> {
        match *self {
            Schedule::Constant { alpha } => check_alpha(&format!("{prefix}.alpha"), alpha),
            Schedule::Linear { alpha0, alpha_final, steps } => {
                check_alpha(&format!("{prefix}.alpha0"), alpha0)?;
                check_alpha(&format!("{prefix}.alpha_final"), alpha_final)?;
                if alpha_final > alpha0 {
                    return Err(Error::param(
                        format!("{prefix}.alpha_final"),
                        "must not exceed alpha0 (the schedule is non-increasing)",
                    ));
                }
                if steps == 0 {
                    return Err(Error::param(format!("{prefix}.steps"), "must be ≥ 1"));
                }
                Ok(())
            }
            Schedule::InverseTime { alpha0, tau } => {
                check_alpha(&format!("{prefix}.alpha0"), alpha0)?;
                if !(tau.is_finite() && tau > 0.0) {
                    return Err(Error::param(format!("{prefix}.tau"), format!("must be > 0, got {tau}")));
                }
                Ok(())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_at("schedule")
    }

    pub fn alpha(&self, t: u64) -> f64 {
        match *self {
            Schedule::Constant { alpha } => alpha,
            Schedule::Linear { alpha0, alpha_final, steps } => {
                let frac = (t.min(steps) as f64) / steps as f64;
                // the max guards against rounding below the final value
                (alpha0 + (alpha_final - alpha0) * frac).max(alpha_final)
            }
            Schedule::InverseTime { alpha0, tau } => alpha0 * tau / (tau + t as f64),
        }
    }
}

/// Reusable buffers for [`adapt_step_in_place`].
#[derive(Default)]
pub struct StepScratch {
    squared: Vec<f64>,
    psi: Vec<f64>,
    nb: Scratch,
}

/// One simultaneous update, every `ψ_p` taken at the pre-step prototypes.
pub fn adapt_step(
    w: &PrototypeSet,
    v: &[f64],
    spec: &NeighborhoodSpec,
    alpha: f64,
) -> Result<PrototypeSet> {
    let mut out = w.clone();
    adapt_step_in_place(&mut out, v, spec, alpha, &mut StepScratch::default())?;
    Ok(out)
}

pub fn adapt_step_in_place(
    w: &mut PrototypeSet,
    v: &[f64],
    spec: &NeighborhoodSpec,
    alpha: f64,
    scratch: &mut StepScratch,
) -> Result<()> {
    check_alpha("alpha", alpha)?;
    w.check_point(v)?;
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::NotANumber("datum"));
    }
    step_unchecked(w, v, spec, alpha, scratch);
    Ok(())
}

fn step_unchecked(
    w: &mut PrototypeSet,
    v: &[f64],
    spec: &NeighborhoodSpec,
    alpha: f64,
    s: &mut StepScratch,
) {
    let n = w.n();
    s.squared.resize(n, 0.0);
    s.psi.resize(n, 0.0);
    w.squared_distances_into(v, &mut s.squared);
    psi_all_from_squared(spec, &s.squared, &mut s.psi, &mut s.nb);
    for p in 0..n {
        let rate = alpha * s.psi[p];
        if rate == 0.0 {
            continue;
        }
        for (x, y) in w.point_mut(p).iter_mut().zip(v) {
            *x += rate * (y - *x);
        }
    }
}

/// State of the run after `iteration` updates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub iteration: u64,
    pub prototypes: PrototypeSet,
    pub energy: Option<f64>,
    /// Position of the sampling stream, enough to resume the trajectory.
    pub stream_counter: u64,
}

/// How a run starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    Explicit { points: Vec<Vec<f64>> },
    /// `count` i.i.d. draws from the training density.
    Random { count: usize },
}

impl InitSpec {
    pub fn build(&self, density: &Density, stream: &mut SeededStream) -> Result<PrototypeSet> {
        match self {
            InitSpec::Explicit { points } => {
                let w = PrototypeSet::new(points.clone())?;
                if w.dim() != density.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: density.dim(),
                        got: w.dim(),
                    });
                }
                Ok(w)
            }
            InitSpec::Random { count } => {
                if *count == 0 {
                    return Err(Error::param("init.count", "must be ≥ 1"));
                }
                PrototypeSet::new((0..*count).map(|_| density.sample(stream)).collect())
            }
        }
    }
}

/// Optional running energy attached to each snapshot.
#[derive(Clone, Debug)]
pub struct EnergyProbe {
    pub integrator: Integrator,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub iterations: u64,
    /// Snapshot period; the initial and final states are always recorded.
    pub snapshot_every: u64,
    pub energy: Option<EnergyProbe>,
}

/// Runs the adaptation loop sequentially on `stream`.
///
/// Records hold iteration 0, every multiple of `snapshot_every`, and the last
/// iteration.
pub fn run(
    density: &Density,
    w0: &PrototypeSet,
    spec: &NeighborhoodSpec,
    schedule: &Schedule,
    opts: &TrainOptions,
    stream: &mut SeededStream,
) -> Result<Vec<TrainRecord>> {
    if opts.iterations == 0 {
        return Err(Error::param("iterations", "must be ≥ 1"));
    }
    if opts.snapshot_every == 0 {
        return Err(Error::param("snapshot_every", "must be ≥ 1"));
    }
    if w0.dim() != density.dim() {
        return Err(Error::DimensionMismatch {
            expected: density.dim(),
            got: w0.dim(),
        });
    }
    spec.validate(w0.n())?;
    schedule.validate()?;
    if let Some(probe) = &opts.energy {
        probe.integrator.validate()?;
    }

    let record = |t: u64, w: &PrototypeSet, stream: &SeededStream| -> Result<TrainRecord> {
        let energy = match &opts.energy {
            Some(probe) => Some(estimate_energy(density, w, spec, &probe.integrator)?.value),
            None => None,
        };
        Ok(TrainRecord {
            iteration: t,
            prototypes: w.clone(),
            energy,
            stream_counter: stream.counter(),
        })
    };

    let mut w = w0.clone();
    let mut v = vec![0.0; density.dim()];
    let mut scratch = StepScratch::default();
    let mut records = vec![record(0, &w, stream)?];
    for t in 0..opts.iterations {
        density.sample_into(stream, &mut v);
        step_unchecked(&mut w, &v, spec, schedule.alpha(t), &mut scratch);
        let done = t + 1;
        if done % opts.snapshot_every == 0 || done == opts.iterations {
            records.push(record(done, &w, stream)?);
        }
    }
    Ok(records)
}
