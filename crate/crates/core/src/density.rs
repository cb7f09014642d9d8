//! Sampleable, evaluable probability densities on bounded supports.
//!
//! All randomness flows through [`SeededStream`], a ChaCha8 keystream addressed
//! by `(seed, stream_id, counter)`. The key is expanded from `seed` with
//! `rand_core`'s PCG32-based `seed_from_u64`, the ChaCha stream number is
//! `stream_id` and `counter` is the 32-bit word position inside that stream,
//! so a given triple yields the same numbers on every platform.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the unit-mass check for densities given by explicit heights.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Words reserved for one forked block of a stream.
const BLOCK_WORDS: u64 = 1 << 32;

/// Counter-addressed pseudo-random stream.
#[derive(Clone, Debug)]
pub struct SeededStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl SeededStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self::at(seed, stream_id, 0)
    }

    /// Stream positioned at word `counter`.
    pub fn at(seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        rng.set_word_pos(counter as u128);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Current word position.
    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    /// Independent sub-stream for block `block`, starting `block * 2^32` words
    /// past this stream's current position. Used to give each parallel chunk
    /// its own reproducible slice of the keystream.
    pub fn fork(&self, block: u64) -> Self {
        Self::at(
            self.seed,
            self.stream_id,
            self.counter() + block * BLOCK_WORDS,
        )
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

impl RngCore for SeededStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// One constant piece `[a, b]` of a piecewise-uniform density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: f64,
    pub b: f64,
    pub height: f64,
}

/// Axis-aligned Gaussian component; `variance` is the covariance diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub weight: f64,
}

/// Serializable description of a density, as written in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    UniformBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    UniformInterval {
        a: f64,
        b: f64,
    },
    PiecewiseUniform {
        segments: Vec<Segment>,
        /// Rescale heights to unit mass instead of checking it.
        #[serde(default)]
        normalize: bool,
    },
    GaussianMixture {
        components: Vec<GaussianComponent>,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
enum Shape {
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
        height: f64,
    },
    Interval {
        a: f64,
        b: f64,
    },
    Piecewise {
        segments: Vec<Segment>,
        /// Running probability mass at the end of each segment.
        cumulative: Vec<f64>,
    },
    Mixture {
        components: Vec<GaussianComponent>,
        lo: Vec<f64>,
        hi: Vec<f64>,
        /// Untruncated mixture mass inside the box.
        mass: f64,
    },
}

/// Tight bounding box of a support, with its Euclidean diameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub diameter: f64,
}

impl Bounds {
    fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        let diameter = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| (h - l) * (h - l))
            .sum::<f64>()
            .sqrt();
        Self { lo, hi, diameter }
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.lo.len()
            && v
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(x, (l, h))| *l <= *x && *x <= *h)
    }
}

/// Immutable probability density with a bounded support.
#[derive(Clone, Debug)]
pub struct Density {
    spec: DensitySpec,
    shape: Shape,
    bounds: Bounds,
}

fn check_box(lo: &[f64], hi: &[f64], field: &str) -> Result<()> {
    if lo.is_empty() || lo.len() != hi.len() {
        return Err(Error::param(
            field,
            format!("lo/hi must be non-empty and equal length ({} vs {})", lo.len(), hi.len()),
        ));
    }
    for (l, h) in lo.iter().zip(hi) {
        if !(l.is_finite() && h.is_finite() && l < h) {
            return Err(Error::param(field, format!("need finite lo < hi, got [{l}, {h}]")));
        }
    }
    Ok(())
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

impl Density {
    pub fn uniform_interval(a: f64, b: f64) -> Result<Self> {
        Self::from_spec(&DensitySpec::UniformInterval { a, b })
    }

    pub fn uniform_box(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        Self::from_spec(&DensitySpec::UniformBox { lo, hi })
    }

    /// Piecewise-uniform density whose heights must already integrate to one.
    pub fn piecewise_uniform(segments: Vec<Segment>) -> Result<Self> {
        Self::from_spec(&DensitySpec::PiecewiseUniform {
            segments,
            normalize: false,
        })
    }

    pub fn gaussian_mixture(
        components: Vec<GaussianComponent>,
        lo: Vec<f64>,
        hi: Vec<f64>,
    ) -> Result<Self> {
        Self::from_spec(&DensitySpec::GaussianMixture { components, lo, hi })
    }

    pub fn from_spec(spec: &DensitySpec) -> Result<Self> {
        let (shape, bounds) = match spec {
            DensitySpec::UniformBox { lo, hi } => {
                check_box(lo, hi, "density")?;
                let bounds = Bounds::new(lo.clone(), hi.clone());
                let height = 1.0 / bounds.volume();
                (
                    Shape::Box {
                        lo: lo.clone(),
                        hi: hi.clone(),
                        height,
                    },
                    bounds,
                )
            }
            DensitySpec::UniformInterval { a, b } => {
                check_box(&[*a], &[*b], "density")?;
                (
                    Shape::Interval { a: *a, b: *b },
                    Bounds::new(vec![*a], vec![*b]),
                )
            }
            DensitySpec::PiecewiseUniform {
                segments,
                normalize,
            } => Self::build_piecewise(segments, *normalize)?,
            DensitySpec::GaussianMixture { components, lo, hi } => {
                Self::build_mixture(components, lo, hi)?
            }
        };
        Ok(Self {
            spec: spec.clone(),
            shape,
            bounds,
        })
    }

    fn build_piecewise(segments: &[Segment], normalize: bool) -> Result<(Shape, Bounds)> {
        if segments.is_empty() {
            return Err(Error::param("density.segments", "at least one segment required"));
        }
        let mut segs = segments.to_vec();
        for (i, s) in segs.iter().enumerate() {
            if !(s.a.is_finite() && s.b.is_finite() && s.a < s.b) {
                return Err(Error::param(
                    format!("density.segments[{i}]"),
                    format!("need finite a < b, got [{}, {}]", s.a, s.b),
                ));
            }
            if !(s.height.is_finite() && s.height >= 0.0) {
                return Err(Error::param(
                    format!("density.segments[{i}].height"),
                    "heights must be finite and nonnegative",
                ));
            }
        }
        segs.sort_by(|x, y| x.a.total_cmp(&y.a));
        for pair in segs.windows(2) {
            if pair[1].a < pair[0].b {
                return Err(Error::param(
                    "density.segments",
                    format!("segments [{}, {}] and [{}, {}] overlap", pair[0].a, pair[0].b, pair[1].a, pair[1].b),
                ));
            }
        }
        let mass: f64 = segs.iter().map(|s| (s.b - s.a) * s.height).sum();
        if normalize {
            if mass <= 0.0 {
                return Err(Error::param("density.segments", "total mass is zero"));
            }
            for s in &mut segs {
                s.height /= mass;
            }
        } else if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::param(
                "density.segments",
                format!("total mass {mass} differs from 1 by more than {MASS_TOLERANCE}"),
            ));
        }
        let live: Vec<&Segment> = segs.iter().filter(|s| s.height > 0.0).collect();
        if live.is_empty() {
            return Err(Error::param("density.segments", "all heights are zero"));
        }
        let lo = live.iter().map(|s| s.a).fold(f64::INFINITY, f64::min);
        let hi = live.iter().map(|s| s.b).fold(f64::NEG_INFINITY, f64::max);
        let mut acc = 0.0;
        let cumulative = segs
            .iter()
            .map(|s| {
                acc += (s.b - s.a) * s.height;
                acc
            })
            .collect();
        Ok((
            Shape::Piecewise {
                segments: segs,
                cumulative,
            },
            Bounds::new(vec![lo], vec![hi]),
        ))
    }

    fn build_mixture(
        components: &[GaussianComponent],
        lo: &[f64],
        hi: &[f64],
    ) -> Result<(Shape, Bounds)> {
        check_box(lo, hi, "density")?;
        if components.is_empty() {
            return Err(Error::param("density.components", "at least one component required"));
        }
        let d = lo.len();
        let total_weight: f64 = components.iter().map(|c| c.weight).sum();
        let mut comps = Vec::with_capacity(components.len());
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != d || c.variance.len() != d {
                return Err(Error::param(
                    format!("density.components[{i}]"),
                    format!("mean/variance must have dimension {d}"),
                ));
            }
            if c.variance.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Error::param(
                    format!("density.components[{i}].variance"),
                    "variances must be positive",
                ));
            }
            if !(c.weight.is_finite() && c.weight >= 0.0) {
                return Err(Error::param(
                    format!("density.components[{i}].weight"),
                    "weights must be nonnegative",
                ));
            }
            let mut c = c.clone();
            c.weight /= total_weight;
            comps.push(c);
        }
        if !(total_weight > 0.0) {
            return Err(Error::param("density.components", "weights sum to zero"));
        }
        let mass: f64 = comps
            .iter()
            .map(|c| {
                let inside: f64 = (0..d)
                    .map(|k| {
                        let s = c.variance[k].sqrt();
                        normal_cdf((hi[k] - c.mean[k]) / s) - normal_cdf((lo[k] - c.mean[k]) / s)
                    })
                    .product();
                c.weight * inside
            })
            .sum();
        if mass < 1e-6 {
            return Err(Error::param(
                "density.components",
                format!("only {mass:e} of the mixture lies inside the bounding box"),
            ));
        }
        Ok((
            Shape::Mixture {
                components: comps,
                lo: lo.to_vec(),
                hi: hi.to_vec(),
                mass,
            },
            Bounds::new(lo.to_vec(), hi.to_vec()),
        ))
    }

    pub fn spec(&self) -> &DensitySpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.bounds.lo.len()
    }

    /// Bounding box of the support and its diameter `δ`.
    pub fn support_bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn diameter(&self) -> f64 {
        self.bounds.diameter
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(())
    }

    pub fn pdf_at(&self, v: &[f64]) -> Result<f64> {
        self.check_dim(v)?;
        Ok(self.pdf_unchecked(v))
    }

    pub(crate) fn pdf_unchecked(&self, v: &[f64]) -> f64 {
        match &self.shape {
            Shape::Box { lo, hi, height } => {
                if inside(v, lo, hi) {
                    *height
                } else {
                    0.0
                }
            }
            Shape::Interval { a, b } => {
                if *a <= v[0] && v[0] <= *b {
                    1.0 / (b - a)
                } else {
                    0.0
                }
            }
            Shape::Piecewise { segments, .. } => segments
                .iter()
                .find(|s| s.a <= v[0] && v[0] <= s.b)
                .map_or(0.0, |s| s.height),
            Shape::Mixture {
                components,
                lo,
                hi,
                mass,
            } => {
                if !inside(v, lo, hi) {
                    return 0.0;
                }
                let raw: f64 = components
                    .iter()
                    .map(|c| {
                        let mut log = 0.0;
                        let mut norm = 1.0;
                        for k in 0..v.len() {
                            let z = v[k] - c.mean[k];
                            log -= 0.5 * z * z / c.variance[k];
                            norm *= (2.0 * std::f64::consts::PI * c.variance[k]).sqrt();
                        }
                        c.weight * log.exp() / norm
                    })
                    .sum();
                raw / mass
            }
        }
    }

    /// Identifies the smooth piece of the density `v` falls in; the density is
    /// continuous (constant, for the uniform variants) on each piece.
    pub(crate) fn piece_signature(&self, v: &[f64]) -> u64 {
        match &self.shape {
            Shape::Box { lo, hi, .. } | Shape::Mixture { lo, hi, .. } => inside(v, lo, hi) as u64,
            Shape::Interval { a, b } => (*a <= v[0] && v[0] <= *b) as u64,
            Shape::Piecewise { segments, .. } => segments
                .iter()
                .position(|s| s.a <= v[0] && v[0] <= s.b)
                .map_or(0, |i| i as u64 + 1),
        }
    }

    /// Draws one point from the density.
    pub fn sample(&self, stream: &mut SeededStream) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.sample_into(stream, &mut out);
        out
    }

    pub fn sample_into(&self, stream: &mut SeededStream, out: &mut [f64]) {
        match &self.shape {
            Shape::Box { lo, hi, .. } => {
                for k in 0..out.len() {
                    out[k] = lo[k] + stream.uniform() * (hi[k] - lo[k]);
                }
            }
            Shape::Interval { a, b } => out[0] = a + stream.uniform() * (b - a),
            Shape::Piecewise {
                segments,
                cumulative,
            } => {
                let total = *cumulative.last().expect("non-empty");
                let u = stream.uniform() * total;
                let i = cumulative
                    .iter()
                    .position(|c| u < *c)
                    .unwrap_or(segments.len() - 1);
                // zero-height segments have zero width in the cumulative table,
                // so `u < c` never selects them; the fallback must skip them too
                let i = (0..=i)
                    .rev()
                    .find(|&j| segments[j].height > 0.0)
                    .expect("at least one positive segment");
                let s = segments[i];
                out[0] = s.a + stream.uniform() * (s.b - s.a);
            }
            Shape::Mixture {
                components, lo, hi, ..
            } => loop {
                let u = stream.uniform();
                let mut acc = 0.0;
                let mut chosen = components.len() - 1;
                for (i, c) in components.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                let c = &components[chosen];
                for k in 0..out.len() {
                    out[k] = c.mean[k] + c.variance[k].sqrt() * stream.standard_normal();
                }
                if inside(out, lo, hi) {
                    break;
                }
            },
        }
    }
}

fn inside(v: &[f64], lo: &[f64], hi: &[f64]) -> bool {
    v.iter()
        .zip(lo.iter().zip(hi))
        .all(|(x, (l, h))| *l <= *x && *x <= *h)
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    fn piecewise() -> impl Strategy<Value = Density> {
        (
            -5.0..5.0f64,
            prop::collection::vec((0.05..2.0f64, prop_oneof![Just(0.0), 0.1..4.0f64]), 1..6),
            0.1..4.0f64,
        )
            .prop_map(|(start, parts, last)| {
                let mut a = start;
                let mut segments = Vec::new();
                for (len, height) in parts {
                    segments.push(Segment { a, b: a + len, height });
                    a += len;
                }
                // one segment always carries mass
                segments.push(Segment { a, b: a + 0.5, height: last });
                Density::from_spec(&DensitySpec::PiecewiseUniform { segments, normalize: true }).unwrap()
            })
    }

    fn mixture() -> impl Strategy<Value = Density> {
        (1usize..3).prop_flat_map(|d| {
            prop::collection::vec(
                (
                    prop::collection::vec(0.0..1.0f64, d),
                    prop::collection::vec(0.005..0.5f64, d),
                    0.1..3.0f64,
                ),
                1..4,
            )
            .prop_map(move |cs| {
                let components = cs
                    .into_iter()
                    .map(|(mean, variance, weight)| GaussianComponent { mean, variance, weight })
                    .collect();
                Density::gaussian_mixture(components, vec![0.0; d], vec![1.0; d]).unwrap()
            })
        })
    }

    fn boxed() -> impl Strategy<Value = Density> {
        prop::collection::vec((-3.0..3.0f64, 0.1..3.0f64), 1..4).prop_map(|sides| {
            let lo: Vec<f64> = sides.iter().map(|s| s.0).collect();
            let hi: Vec<f64> = sides.iter().map(|s| s.0 + s.1).collect();
            Density::uniform_box(lo, hi).unwrap()
        })
    }

    fn any_density() -> impl Strategy<Value = Density> {
        prop_oneof![piecewise(), mixture(), boxed()]
    }

    proptest! {
        #![proptest_config(crate::testkit::seeded(24))]

        #[test]
        fn box_monte_carlo_mass_is_one(d in any_density(), seed in 0u64..1000) {
            let b = d.support_bounds();
            let boxed = Density::uniform_box(b.lo.clone(), b.hi.clone()).unwrap();
            let mut s = SeededStream::new(seed, 5);
            let mut v = vec![0.0; d.dim()];
            let n = 1_000_000;
            let mut sum = 0.0;
            for _ in 0..n {
                boxed.sample_into(&mut s, &mut v);
                sum += d.pdf_at(&v).unwrap();
            }
            let mass = sum / n as f64 * b.volume();
            prop_assert!((mass - 1.0).abs() < 0.01, "{:?}: mass {mass}", d.spec());
        }

        #[test]
        fn samples_have_positive_density(d in any_density(), seed in 0u64..1000) {
            let mut s = SeededStream::new(seed, 6);
            for _ in 0..2000 {
                let v = d.sample(&mut s);
                prop_assert!(d.pdf_at(&v).unwrap() > 0.0, "{:?} at {v:?}", d.spec());
            }
        }
    }
}
