//! Integration of vector-valued functions against a density.
//!
//! Work is cut into fixed chunks regardless of thread count, chunk partials
//! are reduced by pairwise summation in index order, so every estimate is
//! bit-identical for any `--threads` setting.
//!
//! * `MonteCarlo` draws i.i.d. points from the density; chunk `c` uses
//!   `stream.fork(c)`, so the same integrator always sees the same samples.
//! * `Quadrature1D` is composite 3-point Gauss–Legendre over the support.
//!   A panel whose endpoints and midpoint disagree on the integrand's
//!   discrete signature (density piece, Heaviside pattern, tube count) is
//!   bisected until the jump is pinned to ~1e-16 of the panel. Features
//!   narrower than half a panel can be missed.
//! * `Quadrature2D` is the tensor midpoint rule over the bounding box.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{Density, SeededStream};
use crate::error::{Error, Result};

const MC_CHUNK: usize = 4096;
const PANEL_CHUNK: usize = 4096;
const MAX_BISECTIONS: u32 = 52;

const GL_NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
const GL_WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];

#[derive(Clone, Debug)]
pub enum Integrator {
    MonteCarlo { samples: usize, stream: SeededStream },
    Quadrature1D { panels: usize },
    /// `panels` per axis.
    Quadrature2D { panels: usize },
}

/// Config form; the Monte-Carlo seed comes from the experiment's master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IntegratorSpec {
    MonteCarlo {
        samples: usize,
        #[serde(default = "default_mc_stream")]
        stream_id: u64,
    },
    Quadrature1d {
        panels: usize,
    },
    Quadrature2d {
        panels: usize,
    },
}

fn default_mc_stream() -> u64 {
    3
}

impl IntegratorSpec {
    pub fn build(&self, seed: u64) -> Result<Integrator> {
        let integ = match self {
            IntegratorSpec::MonteCarlo { samples, stream_id } => Integrator::MonteCarlo {
                samples: *samples,
                stream: SeededStream::new(seed, *stream_id),
            },
            IntegratorSpec::Quadrature1d { panels } => Integrator::Quadrature1D { panels: *panels },
            IntegratorSpec::Quadrature2d { panels } => Integrator::Quadrature2D { panels: *panels },
        };
        integ.validate()?;
        Ok(integ)
    }
}

impl Integrator {
    pub fn validate(&self) -> Result<()> {
        let (name, count) = match self {
            Integrator::MonteCarlo { samples, .. } => ("integrator.samples", *samples),
            Integrator::Quadrature1D { panels } | Integrator::Quadrature2D { panels } => {
                ("integrator.panels", *panels)
            }
        };
        if count == 0 {
            return Err(Error::param(name, "must be ≥ 1"));
        }
        if matches!(self, Integrator::MonteCarlo { samples: 1, .. }) {
            return Err(Error::param(name, "need ≥ 2 samples for a standard error"));
        }
        Ok(())
    }

    pub fn is_monte_carlo(&self) -> bool {
        matches!(self, Integrator::MonteCarlo { .. })
    }

    pub(crate) fn check_density(&self, density: &Density) -> Result<()> {
        let needed = match self {
            Integrator::MonteCarlo { .. } => return Ok(()),
            Integrator::Quadrature1D { .. } => 1,
            Integrator::Quadrature2D { .. } => 2,
        };
        if density.dim() != needed {
            return Err(Error::DimensionMismatch {
                expected: needed,
                got: density.dim(),
            });
        }
        Ok(())
    }
}

/// Function of the datum integrated against the density.
///
/// `eval` must not include the density itself. `signature` must be constant
/// wherever `eval` is smooth; the density's own pieces are added by the
/// engine.
pub(crate) trait Integrand: Sync {
    type Scratch: Default;

    fn width(&self) -> usize;

    fn eval(&self, v: &[f64], out: &mut [f64], scratch: &mut Self::Scratch);

    fn signature(&self, v: &[f64], scratch: &mut Self::Scratch) -> u64;
}

/// Integral estimates with Monte-Carlo standard errors (zero for quadrature).
#[derive(Clone, Debug, PartialEq)]
pub struct Integral {
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Pairwise (tree) sum of equally sized vectors, in index order.
fn pairwise(parts: &[Vec<f64>], k: usize) -> Vec<f64> {
    match parts.len() {
        0 => vec![0.0; k],
        1 => parts[0].clone(),
        len => {
            let (l, r) = parts.split_at(len / 2);
            let mut left = pairwise(l, k);
            for (a, b) in left.iter_mut().zip(pairwise(r, k)) {
                *a += b;
            }
            left
        }
    }
}

pub(crate) fn integrate<I: Integrand>(
    density: &Density,
    integ: &Integrator,
    f: &I,
) -> Result<Integral> {
    integ.validate()?;
    integ.check_density(density)?;
    let k = f.width();
    match integ {
        Integrator::MonteCarlo { samples, stream } => {
            let chunks = samples.div_ceil(MC_CHUNK);
            // each chunk yields [Σf_0..Σf_k, Σf_0²..Σf_k²]
            let parts: Vec<Vec<f64>> = (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let mut s = stream.fork(c as u64);
                    let count = MC_CHUNK.min(samples - c * MC_CHUNK);
                    let mut part = vec![0.0; 2 * k];
                    let mut v = vec![0.0; density.dim()];
                    let mut out = vec![0.0; k];
                    let mut scratch = I::Scratch::default();
                    for _ in 0..count {
                        density.sample_into(&mut s, &mut v);
                        f.eval(&v, &mut out, &mut scratch);
                        for j in 0..k {
                            part[j] += out[j];
                            part[k + j] += out[j] * out[j];
                        }
                    }
                    part
                })
                .collect();
            let total = pairwise(&parts, 2 * k);
            let n = *samples as f64;
            let values: Vec<f64> = total[..k].iter().map(|s| s / n).collect();
            let stderr = values
                .iter()
                .zip(&total[k..])
                .map(|(m, sq)| {
                    let var = ((sq / n - m * m) * n / (n - 1.0)).max(0.0);
                    (var / n).sqrt()
                })
                .collect();
            Ok(Integral { values, stderr })
        }
        Integrator::Quadrature1D { panels } => {
            let b = density.support_bounds();
            let values = refined_1d(density, b.lo[0], b.hi[0], *panels, f);
            Ok(Integral {
                stderr: vec![0.0; k],
                values,
            })
        }
        Integrator::Quadrature2D { panels } => {
            let b = density.support_bounds();
            let n = *panels;
            let hx = (b.hi[0] - b.lo[0]) / n as f64;
            let hy = (b.hi[1] - b.lo[1]) / n as f64;
            let parts: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut part = vec![0.0; k];
                    let mut out = vec![0.0; k];
                    let mut scratch = I::Scratch::default();
                    let x = b.lo[0] + (i as f64 + 0.5) * hx;
                    for j in 0..n {
                        let v = [x, b.lo[1] + (j as f64 + 0.5) * hy];
                        let weight = density.pdf_unchecked(&v) * hx * hy;
                        if weight == 0.0 {
                            continue;
                        }
                        f.eval(&v, &mut out, &mut scratch);
                        for (s, o) in part.iter_mut().zip(&out) {
                            *s += weight * o;
                        }
                    }
                    part
                })
                .collect();
            Ok(Integral {
                values: pairwise(&parts, k),
                stderr: vec![0.0; k],
            })
        }
    }
}

/// Refined composite Gauss–Legendre of `P(v) f(v)` over `[lo, hi]`.
pub(crate) fn refined_1d<I: Integrand>(
    density: &Density,
    lo: f64,
    hi: f64,
    panels: usize,
    f: &I,
) -> Vec<f64> {
    let k = f.width();
    let chunks = panels.div_ceil(PANEL_CHUNK);
    let edge = |i: usize| lo + (hi - lo) * (i as f64 / panels as f64);
    let parts: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut ctx = PanelCtx {
                density,
                f,
                scratch: I::Scratch::default(),
                out: vec![0.0; k],
                acc: vec![0.0; k],
            };
            let first = c * PANEL_CHUNK;
            let last = panels.min(first + PANEL_CHUNK);
            let mut a = edge(first);
            let mut sa = ctx.signature(a);
            for i in first..last {
                let b = edge(i + 1);
                let sb = ctx.signature(b);
                ctx.panel(a, b, sa, sb, 0);
                a = b;
                sa = sb;
            }
            ctx.acc
        })
        .collect();
    pairwise(&parts, k)
}

struct PanelCtx<'a, I: Integrand> {
    density: &'a Density,
    f: &'a I,
    scratch: I::Scratch,
    out: Vec<f64>,
    acc: Vec<f64>,
}

impl<I: Integrand> PanelCtx<'_, I> {
    fn signature(&mut self, x: f64) -> u64 {
        let v = [x];
        let piece = self.density.piece_signature(&v);
        self.f.signature(&v, &mut self.scratch) ^ piece.wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }

    fn panel(&mut self, a: f64, b: f64, sa: u64, sb: u64, depth: u32) {
        let m = 0.5 * (a + b);
        let sm = self.signature(m);
        if (sa == sm && sm == sb) || depth >= MAX_BISECTIONS || m <= a || m >= b {
            self.gauss(a, b);
        } else {
            self.panel(a, m, sa, sm, depth + 1);
            self.panel(m, b, sm, sb, depth + 1);
        }
    }

    fn gauss(&mut self, a: f64, b: f64) {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (x, wgt) in GL_NODES.iter().zip(GL_WEIGHTS) {
            let v = [mid + half * x];
            let p = self.density.pdf_unchecked(&v);
            if p == 0.0 {
                continue;
            }
            self.f.eval(&v, &mut self.out, &mut self.scratch);
            let weight = wgt * half * p;
            for (s, o) in self.acc.iter_mut().zip(&self.out) {
                *s += weight * o;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::Segment;

    /// Polynomial moments `1, v, v²` plus a step at `cut`.
    struct Moments {
        cut: f64,
    }

    impl Integrand for Moments {
        type Scratch = ();

        fn width(&self) -> usize {
            4
        }

        fn eval(&self, v: &[f64], out: &mut [f64], _: &mut ()) {
            out[0] = 1.0;
            out[1] = v[0];
            out[2] = v[0] * v[0];
            out[3] = (v[0] >= self.cut) as u8 as f64;
        }

        fn signature(&self, v: &[f64], _: &mut ()) -> u64 {
            (v[0] >= self.cut) as u64
        }
    }

    #[test]
    fn refined_quadrature_is_exact_for_steps() {
        let d = Density::piecewise_uniform(vec![
            Segment { a: 0.0, b: 0.3, height: 0.5 },
            Segment { a: 0.3, b: 1.0, height: 0.85 / 0.7 },
        ])
        .unwrap();
        let f = Moments { cut: 0.612_345_678_9 };
        let got = integrate(&d, &Integrator::Quadrature1D { panels: 7 }, &f).unwrap();
        let h2 = 0.85 / 0.7;
        let mean = 0.5 * (0.09 / 2.0) + h2 * (1.0 - 0.09) / 2.0;
        let second = 0.5 * 0.027 / 3.0 + h2 * (1.0 - 0.027) / 3.0;
        let above = h2 * (1.0 - f.cut);
        assert!((got.values[0] - 1.0).abs() < 1e-14);
        assert!((got.values[1] - mean).abs() < 1e-14);
        assert!((got.values[2] - second).abs() < 1e-14);
        assert!((got.values[3] - above).abs() < 1e-14);
    }

    #[test]
    fn quadrature_2d_integrates_unit_mass() {
        let d = Density::uniform_box(vec![0.0, 0.0], vec![2.0, 1.0]).unwrap();
        let got = integrate(&d, &Integrator::Quadrature2D { panels: 64 }, &Moments { cut: 0.5 }).unwrap();
        assert!((got.values[0] - 1.0).abs() < 1e-12);
        assert!((got.values[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_is_reproducible_and_thread_independent() {
        let d = Density::uniform_interval(0.0, 1.0).unwrap();
        let integ = Integrator::MonteCarlo {
            samples: 50_001,
            stream: SeededStream::new(1234, 3),
        };
        let f = Moments { cut: 0.25 };
        let a = integrate(&d, &integ, &f).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| integrate(&d, &integ, &f).unwrap());
        assert_eq!(a, b);
        assert!((a.values[1] - 0.5).abs() < 4.0 * a.stderr[1]);
        assert!((a.stderr[1] - (1.0f64 / 12.0 / 50_001.0).sqrt()).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_plans() {
        let d = Density::uniform_box(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(integrate(&d, &Integrator::Quadrature1D { panels: 10 }, &Moments { cut: 0.0 }).is_err());
        assert!(Integrator::Quadrature2D { panels: 0 }.validate().is_err());
    }
}
