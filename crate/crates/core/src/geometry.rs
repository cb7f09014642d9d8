//! Squared distances, the Heaviside step, winners and the cellular manifold.
//!
//! Cellular membership is decided by the squared-distance gap: `v` lies in the
//! cellular manifold `V^η` iff `d_r² − d_p*² > θ` for every `r ≠ p*`, with
//! `θ = η²`. The complement is the tubular manifold around the Voronoï
//! boundaries. Indices are 0-based; prototype `p` here is `w_{p+1}` in the
//! 1-based numbering used by config files and reports.

use crate::error::{Error, Result};

/// `H(x) = 1` for `x ≥ 0`, `0` otherwise.
pub fn heaviside(x: f64) -> Result<u8> {
    if x.is_nan() {
        return Err(Error::NotANumber("heaviside"));
    }
    Ok(step(x))
}

#[inline]
pub(crate) fn step(x: f64) -> u8 {
    (x >= 0.0) as u8
}

/// Ordered set of `n ≥ 1` prototypes in `R^d`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    data: Vec<f64>,
    dim: usize,
}

impl PrototypeSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points.first().map(Vec::len).unwrap_or(0);
        if points.is_empty() || dim == 0 {
            return Err(Error::param("prototypes", "need at least one point of dimension ≥ 1"));
        }
        let mut data = Vec::with_capacity(points.len() * dim);
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::param(
                    format!("prototypes[{i}]"),
                    format!("expected dimension {dim}, got {}", p.len()),
                ));
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::param(format!("prototypes[{i}]"), "coordinates must be finite"));
            }
            data.extend_from_slice(p);
        }
        Ok(Self { data, dim })
    }

    pub fn from_flat(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::param(
                "prototypes",
                format!("{} coordinates do not split into points of dimension {dim}", data.len()),
            ));
        }
        Ok(Self { data, dim })
    }

    /// Convenience for 1-D sets.
    pub fn scalars(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|x| vec![*x]).collect())
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn point_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vecs(&self) -> Vec<Vec<f64>> {
        self.points().map(<[f64]>::to_vec).collect()
    }

    /// `w + ζ`, with `zeta` laid out like `self`.
    pub fn perturbed(&self, zeta: &[f64]) -> Self {
        debug_assert_eq!(zeta.len(), self.data.len());
        Self {
            data: self.data.iter().zip(zeta).map(|(a, b)| a + b).collect(),
            dim: self.dim,
        }
    }

    pub(crate) fn check_point(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_index(&self, p: usize) -> Result<()> {
        if p >= self.n() {
            return Err(Error::IndexOutOfRange {
                index: p,
                len: self.n(),
            });
        }
        Ok(())
    }

    /// Writes `‖w_l − v‖²` for every prototype into `out`.
    pub(crate) fn squared_distances_into(&self, v: &[f64], out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(self.points()) {
            *o = w.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }
}

/// Squared distances from a datum to every prototype, and the winner.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceProfile {
    pub squared: Vec<f64>,
    pub winner: usize,
}

impl DistanceProfile {
    pub fn from_squared(squared: Vec<f64>) -> Self {
        let winner = lowest_index_min(&squared);
        Self { squared, winner }
    }

    /// `min_{r≠p*} (d_r² − d_p*²)`; `None` when there is a single prototype.
    pub fn min_gap(&self) -> Option<f64> {
        min_gap(&self.squared, self.winner)
    }

    pub fn in_cellular(&self, cp: &CellularParams) -> bool {
        self.min_gap().is_none_or(|g| g > cp.theta())
    }
}

pub(crate) fn lowest_index_min(squared: &[f64]) -> usize {
    let mut best = 0;
    for (l, d) in squared.iter().enumerate().skip(1) {
        if *d < squared[best] {
            best = l;
        }
    }
    best
}

pub(crate) fn min_gap(squared: &[f64], winner: usize) -> Option<f64> {
    let base = squared[winner];
    squared
        .iter()
        .enumerate()
        .filter(|(r, _)| *r != winner)
        .map(|(_, d)| d - base)
        .reduce(f64::min)
}

pub fn distance_profile(w: &PrototypeSet, v: &[f64]) -> Result<DistanceProfile> {
    w.check_point(v)?;
    let mut squared = vec![0.0; w.n()];
    w.squared_distances_into(v, &mut squared);
    Ok(DistanceProfile::from_squared(squared))
}

/// Tube parameters: `θ = η²` is the gap threshold, `ν` the perturbation radius
/// under which every Heaviside comparison on `V^η` is frozen, with
/// `μ = √(4δ² + η²/2) − 2δ` and `ν = min{μ, η²/(10δ)}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellularParams {
    eta: f64,
    theta: f64,
    nu: f64,
    mu: f64,
    delta: f64,
}

impl CellularParams {
    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Diameter `δ` of the bounding set the bound was computed for.
    pub fn delta(&self) -> f64 {
        self.delta
    }
}

pub fn perturbation_bound(eta: f64, delta: f64) -> Result<CellularParams> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::param("eta", format!("must be finite and > 0, got {eta}")));
    }
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::param("delta", format!("must be finite and > 0, got {delta}")));
    }
    let theta = eta * eta;
    // √(4δ² + θ/2) − 2δ rewritten to avoid cancellation when η ≪ δ
    let mu = (theta / 2.0) / ((4.0 * delta * delta + theta / 2.0).sqrt() + 2.0 * delta);
    let nu = mu.min(theta / (10.0 * delta));
    Ok(CellularParams {
        eta,
        theta,
        nu,
        mu,
        delta,
    })
}

pub fn in_cellular_manifold(w: &PrototypeSet, v: &[f64], cp: &CellularParams) -> Result<bool> {
    Ok(distance_profile(w, v)?.in_cellular(cp))
}

/// `1` when `v` lies in the tubular manifold `V \ V^η`.
pub fn tube_indicator(w: &PrototypeSet, v: &[f64], cp: &CellularParams) -> Result<u8> {
    Ok(1 - in_cellular_manifold(w, v, cp)? as u8)
}

/// Row-major `n × n` matrix of `H(d_r² − d_p²)`.
pub fn heaviside_matrix(squared: &[f64]) -> Vec<u8> {
    let n = squared.len();
    let mut m = Vec::with_capacity(n * n);
    for r in 0..n {
        for p in 0..n {
            m.push(step(squared[r] - squared[p]));
        }
    }
    m
}

/// Hash of the full Heaviside matrix; every neighborhood function in the
/// crate is constant on sets where this value is constant.
pub(crate) fn order_signature(squared: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let n = squared.len();
    for r in 0..n {
        for p in (r + 1)..n {
            let x = squared[r] - squared[p];
            let code = if x > 0.0 {
                1
            } else if x < 0.0 {
                2
            } else {
                3
            };
            h = (h ^ code).wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> PrototypeSet {
        PrototypeSet::scalars(&[0.0, 2.0]).unwrap()
    }

    #[test]
    fn heaviside_values() {
        assert_eq!(heaviside(0.0).unwrap(), 1);
        assert_eq!(heaviside(-0.5).unwrap(), 0);
        assert_eq!(heaviside(3.0).unwrap(), 1);
        assert_eq!(heaviside(-0.0).unwrap(), 1);
        assert!(heaviside(f64::NAN).is_err());
    }

    #[test]
    fn distance_profile_examples() {
        let p = distance_profile(&pair(), &[1.0]).unwrap();
        assert_eq!(p.squared, vec![1.0, 1.0]);
        assert_eq!(p.winner, 0);
        let p = distance_profile(&pair(), &[0.9]).unwrap();
        assert!((p.squared[0] - 0.81).abs() < 1e-15 && (p.squared[1] - 1.21).abs() < 1e-15);
        assert_eq!(p.winner, 0);
        let w = PrototypeSet::new(vec![vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let p = distance_profile(&w, &[0.0, 0.0]).unwrap();
        assert_eq!((p.squared.clone(), p.winner), (vec![0.0, 25.0], 0));
        assert!(distance_profile(&w, &[0.0]).is_err());
    }

    #[test]
    fn cellular_membership_examples() {
        let cp = perturbation_bound(0.5, 2.0).unwrap();
        assert_eq!(cp.theta(), 0.25);
        assert!(in_cellular_manifold(&pair(), &[1.1], &cp).unwrap());
        assert!(!in_cellular_manifold(&pair(), &[1.05], &cp).unwrap());
        for eta in [0.1, 0.5, 1.0] {
            let cp = perturbation_bound(eta, 2.0).unwrap();
            assert!(in_cellular_manifold(&pair(), &[0.0], &cp).unwrap());
            assert_eq!(tube_indicator(&pair(), &[0.0], &cp).unwrap(), 0);
        }
        assert_eq!(tube_indicator(&pair(), &[1.05], &cp).unwrap(), 1);
        assert_eq!(tube_indicator(&pair(), &[1.1], &cp).unwrap(), 0);
    }

    #[test]
    fn single_prototype_has_no_tube() {
        let w = PrototypeSet::scalars(&[0.4]).unwrap();
        let cp = perturbation_bound(10.0, 1.0).unwrap();
        for v in [-3.0, 0.4, 0.41, 7.0] {
            assert_eq!(tube_indicator(&w, &[v], &cp).unwrap(), 0);
        }
    }

    #[test]
    fn coincident_winners_are_always_tubular() {
        let w = PrototypeSet::scalars(&[0.5, 0.5, 0.9]).unwrap();
        let cp = perturbation_bound(1e-6, 1.0).unwrap();
        for v in [0.0, 0.5, 0.6, 0.69] {
            assert_eq!(tube_indicator(&w, &[v], &cp).unwrap(), 1);
        }
    }

    #[test]
    fn perturbation_bound_examples() {
        let cp = perturbation_bound(0.5, 2.0).unwrap();
        assert!((cp.mu() - (16.125f64.sqrt() - 4.0)).abs() < 1e-15);
        assert!((cp.mu() - 0.015_594_5).abs() < 5e-7);
        assert!((cp.nu() - 0.0125).abs() < 1e-15);
        let cp = perturbation_bound(1.0, 0.5).unwrap();
        assert!((cp.mu() - (1.5f64.sqrt() - 1.0)).abs() < 1e-15);
        assert!((cp.nu() - 0.2).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for k in 1..12 {
            let nu = perturbation_bound(10f64.powi(-k), 1.0).unwrap().nu();
            assert!(nu > 0.0 && nu < last);
            last = nu;
        }
        assert!(last < 1e-20);
        assert!(perturbation_bound(0.0, 1.0).is_err());
        assert!(perturbation_bound(0.1, -1.0).is_err());
    }

    /// Width of the 1-D two-prototype tube, measured by bisection on the gap
    /// test alone, matches `θ / |w2 − w1|` (half-width `θ / (2|w2 − w1|)`).
    #[test]
    fn one_dimensional_tube_width() {
        for (w1, w2, theta) in [(0.25, 0.75, 0.01), (0.3, 0.8, 0.04), (-1.0, 2.5, 0.3)] {
            let w = PrototypeSet::scalars(&[w1, w2]).unwrap();
            let cp = perturbation_bound(f64::sqrt(theta), 10.0).unwrap();
            let mid = 0.5 * (w1 + w2);
            let edge = |sign: f64| {
                let (mut inside, mut outside) = (mid, mid + sign * (w2 - w1) / 2.0);
                for _ in 0..200 {
                    let m = 0.5 * (inside + outside);
                    if tube_indicator(&w, &[m], &cp).unwrap() == 1 {
                        inside = m;
                    } else {
                        outside = m;
                    }
                }
                inside
            };
            let width = edge(1.0) - edge(-1.0);
            let expected = cp.theta() / (w2 - w1);
            assert!((width - expected).abs() < 1e-6, "{width} vs {expected}");
        }
    }

    #[test]
    fn heaviside_matrix_marks_ties_both_ways() {
        let m = heaviside_matrix(&[1.0, 1.0, 4.0]);
        assert_eq!(m, vec![1, 1, 0, 1, 1, 0, 1, 1, 1]);
    }
}
