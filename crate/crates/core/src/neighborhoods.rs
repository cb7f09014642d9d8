//! Neighborhood functions `ψ_p(w, v)` built only from Heaviside steps of
//! squared-distance differences `H(d_l² − d_m²)`.
//!
//! Every family is evaluated from the vector of squared distances, so adding a
//! constant to all of them leaves the result unchanged.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{step, PrototypeSet};

/// Fixed undirected graph over prototype indices.
///
/// All-pairs hop distances are computed once at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    hops: Vec<Option<u32>>,
}

impl NeighborGraph {
    pub fn chain(n: usize) -> Result<Self> {
        let edges = (1..n).map(|i| (i - 1, i)).collect();
        Self::explicit(n, edges)
    }

    /// Row-major grid: node `r * cols + c` sits at row `r`, column `c`.
    pub fn grid2d(rows: usize, cols: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let id = r * cols + c;
                if c + 1 < cols {
                    edges.push((id, id + 1));
                }
                if r + 1 < rows {
                    edges.push((id, id + cols));
                }
            }
        }
        Self::explicit(rows * cols, edges)
    }

    /// Graph from 0-based edge pairs.
    pub fn explicit(n: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::param("graph", "node count must be ≥ 1"));
        }
        let mut adjacency = vec![Vec::new(); n];
        let mut clean = Vec::with_capacity(edges.len());
        for (i, &(a, b)) in edges.iter().enumerate() {
            if a >= n || b >= n {
                return Err(Error::param(
                    format!("graph.edges[{i}]"),
                    format!("edge ({a}, {b}) references a node outside 0..{n}"),
                ));
            }
            if a == b {
                return Err(Error::param(format!("graph.edges[{i}]"), "self-loops are not allowed"));
            }
            let e = (a.min(b), a.max(b));
            if !clean.contains(&e) {
                clean.push(e);
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
        let mut hops = vec![None; n * n];
        let mut queue = VecDeque::new();
        for source in 0..n {
            let row = &mut hops[source * n..(source + 1) * n];
            row[source] = Some(0);
            queue.clear();
            queue.push_back(source);
            while let Some(u) = queue.pop_front() {
                let du = row[u].expect("queued nodes are labelled");
                for &x in &adjacency[u] {
                    if row[x].is_none() {
                        row[x] = Some(du + 1);
                        queue.push_back(x);
                    }
                }
            }
        }
        Ok(Self {
            n,
            edges: clean,
            hops,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Shortest hop count, `None` when `b` is unreachable from `a`.
    pub fn distance(&self, a: usize, b: usize) -> Result<Option<u32>> {
        for x in [a, b] {
            if x >= self.n {
                return Err(Error::IndexOutOfRange { index: x, len: self.n });
            }
        }
        Ok(self.hops[a * self.n + b])
    }

    #[inline]
    fn hop(&self, a: usize, b: usize) -> Option<u32> {
        self.hops[a * self.n + b]
    }
}

pub fn graph_distance(g: &NeighborGraph, a: usize, b: usize) -> Result<Option<u32>> {
    g.distance(a, b)
}

/// Config form of a graph. Explicit edges use 1-based node ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSpec {
    Chain { n: usize },
    Grid2d { rows: usize, cols: usize },
    Explicit { n: usize, edges: Vec<[usize; 2]> },
}

impl GraphSpec {
    pub fn build(&self) -> Result<NeighborGraph> {
        match self {
            GraphSpec::Chain { n } => NeighborGraph::chain(*n),
            GraphSpec::Grid2d { rows, cols } => NeighborGraph::grid2d(*rows, *cols),
            GraphSpec::Explicit { n, edges } => {
                let mut zero_based = Vec::with_capacity(edges.len());
                for (i, [a, b]) in edges.iter().enumerate() {
                    if *a == 0 || *b == 0 {
                        return Err(Error::param(
                            format!("graph.edges[{i}]"),
                            "node ids are 1-based",
                        ));
                    }
                    zero_based.push((a - 1, b - 1));
                }
                NeighborGraph::explicit(*n, zero_based)
            }
        }
    }
}

/// `h_σ(u) = exp(−u/σ)`, with `h_0(0) = 1` and `h_0(u > 0) = 0`.
pub fn h_sigma(u: f64, sigma: f64) -> Result<f64> {
    if !(u >= 0.0) {
        return Err(Error::param("u", format!("must be ≥ 0, got {u}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::param("sigma", format!("must be ≥ 0, got {sigma}")));
    }
    Ok(h(u, sigma))
}

#[inline]
fn h(u: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        (u == 0.0) as u8 as f64
    } else {
        (-u / sigma).exp()
    }
}

#[inline]
fn h_hops(hops: Option<u32>, sigma: f64) -> f64 {
    hops.map_or(0.0, |d| h(d as f64, sigma))
}

/// Choice of neighborhood family and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum NeighborhoodSpec {
    /// Lowest-index winner only (`A_p`).
    KMeansWinner,
    /// Every tied winner (`K_p`).
    KMeansAllWinners,
    Som { graph: NeighborGraph, sigma: f64 },
    NeuralGas { sigma: f64 },
    RecruitingNg { sigma: f64, epsilons: Vec<f64> },
    RecruitingSom { graph: NeighborGraph, sigmas: Vec<f64> },
}

fn check_sigma(name: &str, sigma: f64) -> Result<()> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::param(name, format!("must be finite and ≥ 0, got {sigma}")));
    }
    Ok(())
}

impl NeighborhoodSpec {
    /// Checks parameter ranges and that sizes match `n` prototypes.
    pub fn validate(&self, n: usize) -> Result<()> {
        let graph_size = |g: &NeighborGraph| {
            if g.node_count() != n {
                return Err(Error::param(
                    "neighborhood.graph",
                    format!("graph has {} nodes but there are {n} prototypes", g.node_count()),
                ));
            }
            Ok(())
        };
        match self {
            NeighborhoodSpec::KMeansWinner | NeighborhoodSpec::KMeansAllWinners => Ok(()),
            NeighborhoodSpec::Som { graph, sigma } => {
                check_sigma("neighborhood.sigma", *sigma)?;
                graph_size(graph)
            }
            NeighborhoodSpec::NeuralGas { sigma } => check_sigma("neighborhood.sigma", *sigma),
            NeighborhoodSpec::RecruitingNg { sigma, epsilons } => {
                check_sigma("neighborhood.sigma", *sigma)?;
                if epsilons.len() != n {
                    return Err(Error::param(
                        "neighborhood.epsilons",
                        format!("expected {n} values, got {}", epsilons.len()),
                    ));
                }
                for (i, e) in epsilons.iter().enumerate() {
                    if !(0.0..=1.0).contains(e) {
                        return Err(Error::param(
                            format!("neighborhood.epsilons[{i}]"),
                            format!("must lie in [0, 1], got {e}"),
                        ));
                    }
                }
                Ok(())
            }
            NeighborhoodSpec::RecruitingSom { graph, sigmas } => {
                graph_size(graph)?;
                if sigmas.len() != n {
                    return Err(Error::param(
                        "neighborhood.sigmas",
                        format!("expected {n} values, got {}", sigmas.len()),
                    ));
                }
                for (i, s) in sigmas.iter().enumerate() {
                    check_sigma(&format!("neighborhood.sigmas[{i}]"), *s)?;
                }
                Ok(())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NeighborhoodSpec::KMeansWinner => "kmeans_winner",
            NeighborhoodSpec::KMeansAllWinners => "kmeans_all_winners",
            NeighborhoodSpec::Som { .. } => "som",
            NeighborhoodSpec::NeuralGas { .. } => "neural_gas",
            NeighborhoodSpec::RecruitingNg { .. } => "recruiting_ng",
            NeighborhoodSpec::RecruitingSom { .. } => "recruiting_som",
        }
    }
}

/// Reusable buffers for evaluating all `ψ_p` at one datum.
#[derive(Clone, Debug, Default)]
pub(crate) struct Scratch {
    k: Vec<u8>,
    a: Vec<u8>,
}

/// `K_p = Π_k H(d_k² − d_p²)` for every `p`.
fn voronoi_indicators_into(squared: &[f64], out: &mut Vec<u8>) {
    out.clear();
    out.extend(
        squared
            .iter()
            .map(|dp| squared.iter().map(|dk| step(dk - dp)).product::<u8>()),
    );
}

/// `A_p = K_p · Π_l (K_l (H(l − p) − 1) + 1)` for every `p`.
fn winner_selectors_into(k: &[u8], out: &mut Vec<u8>) {
    out.clear();
    for p in 0..k.len() {
        let mut a = k[p] as i32;
        for (l, &kl) in k.iter().enumerate() {
            let hlp = step(l as f64 - p as f64) as i32;
            a *= kl as i32 * (hlp - 1) + 1;
        }
        out.push(a as u8);
    }
}

/// `k_p = Σ_q Υ(d_p² − d_q²)` with `Υ(u) = 1 − H(−u)`.
fn rank_from_squared(squared: &[f64], p: usize) -> u32 {
    squared
        .iter()
        .map(|dq| 1 - step(-(squared[p] - dq)) as u32)
        .sum()
}

/// Evaluates every `ψ_p` from the squared distances. Parameters must have been
/// validated against `squared.len()`.
pub(crate) fn psi_all_from_squared(
    spec: &NeighborhoodSpec,
    squared: &[f64],
    out: &mut [f64],
    scratch: &mut Scratch,
) {
    let n = squared.len();
    match spec {
        NeighborhoodSpec::KMeansAllWinners => {
            voronoi_indicators_into(squared, &mut scratch.k);
            for (o, k) in out.iter_mut().zip(&scratch.k) {
                *o = *k as f64;
            }
        }
        NeighborhoodSpec::NeuralGas { sigma } => {
            for (p, o) in out.iter_mut().enumerate() {
                *o = h(rank_from_squared(squared, p) as f64, *sigma);
            }
        }
        _ => {
            voronoi_indicators_into(squared, &mut scratch.k);
            winner_selectors_into(&scratch.k, &mut scratch.a);
            let a = &scratch.a;
            match spec {
                NeighborhoodSpec::KMeansWinner => {
                    for (o, ap) in out.iter_mut().zip(a) {
                        *o = *ap as f64;
                    }
                }
                NeighborhoodSpec::Som { graph, sigma } => {
                    for (p, o) in out.iter_mut().enumerate() {
                        *o = (0..n)
                            .map(|q| a[q] as f64 * h_hops(graph.hop(q, p), *sigma))
                            .sum();
                    }
                }
                NeighborhoodSpec::RecruitingNg { sigma, epsilons } => {
                    let recruit: f64 = (0..n).map(|q| a[q] as f64 * epsilons[q]).sum();
                    for (p, o) in out.iter_mut().enumerate() {
                        *o = h(rank_from_squared(squared, p) as f64, *sigma) * recruit;
                    }
                }
                NeighborhoodSpec::RecruitingSom { graph, sigmas } => {
                    for (p, o) in out.iter_mut().enumerate() {
                        *o = (0..n)
                            .map(|q| a[q] as f64 * h_hops(graph.hop(q, p), sigmas[q]))
                            .sum();
                    }
                }
                NeighborhoodSpec::KMeansAllWinners | NeighborhoodSpec::NeuralGas { .. } => {
                    unreachable!()
                }
            }
        }
    }
}

fn squared_for(w: &PrototypeSet, v: &[f64]) -> Result<Vec<f64>> {
    w.check_point(v)?;
    let mut sq = vec![0.0; w.n()];
    w.squared_distances_into(v, &mut sq);
    Ok(sq)
}

/// Indicator `K_p` of the closed Voronoï cell of `w_p`; ties give 1 to all.
pub fn voronoi_indicator(w: &PrototypeSet, v: &[f64], p: usize) -> Result<u8> {
    w.check_index(p)?;
    let sq = squared_for(w, v)?;
    Ok(sq.iter().map(|dk| step(dk - sq[p])).product())
}

/// `A_p`: 1 iff `p` is the lowest-index winner.
pub fn winner_selector(w: &PrototypeSet, v: &[f64], p: usize) -> Result<u8> {
    w.check_index(p)?;
    let sq = squared_for(w, v)?;
    let mut k = Vec::new();
    let mut a = Vec::new();
    voronoi_indicators_into(&sq, &mut k);
    winner_selectors_into(&k, &mut a);
    Ok(a[p])
}

/// Number of prototypes strictly closer to `v` than `w_p`.
pub fn rank(w: &PrototypeSet, v: &[f64], p: usize) -> Result<u32> {
    w.check_index(p)?;
    let sq = squared_for(w, v)?;
    Ok(rank_from_squared(&sq, p))
}

pub fn psi(spec: &NeighborhoodSpec, w: &PrototypeSet, v: &[f64], p: usize) -> Result<f64> {
    w.check_index(p)?;
    Ok(psi_all(spec, w, v)?[p])
}

/// All `ψ_p(w, v)` at once.
pub fn psi_all(spec: &NeighborhoodSpec, w: &PrototypeSet, v: &[f64]) -> Result<Vec<f64>> {
    spec.validate(w.n())?;
    let sq = squared_for(w, v)?;
    let mut out = vec![0.0; w.n()];
    psi_all_from_squared(spec, &sq, &mut out, &mut Scratch::default());
    Ok(out)
}

/// `ψ` evaluated directly from a vector of squared distances.
pub fn psi_from_squared(spec: &NeighborhoodSpec, squared: &[f64]) -> Result<Vec<f64>> {
    spec.validate(squared.len())?;
    let mut out = vec![0.0; squared.len()];
    psi_all_from_squared(spec, squared, &mut out, &mut Scratch::default());
    Ok(out)
}


#[cfg(test)]
mod properties {
    use super::*;
    use crate::geometry::perturbation_bound;
    use proptest::prelude::*;

    fn specs(n: usize, sigma: f64, eps: &[f64], sigmas: &[f64]) -> Vec<NeighborhoodSpec> {
        let graph = NeighborGraph::chain(n).unwrap();
        vec![
            NeighborhoodSpec::KMeansWinner,
            NeighborhoodSpec::KMeansAllWinners,
            NeighborhoodSpec::Som { graph: graph.clone(), sigma },
            NeighborhoodSpec::NeuralGas { sigma },
            NeighborhoodSpec::RecruitingNg { sigma, epsilons: eps[..n].to_vec() },
            NeighborhoodSpec::RecruitingSom { graph, sigmas: sigmas[..n].to_vec() },
        ]
    }

    /// `n` lattice points in `{0..4}^d`, plus a lattice datum.
    fn lattice() -> impl Strategy<Value = (PrototypeSet, Vec<f64>)> {
        (1usize..7, 1usize..4).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(0i32..5, n * d).prop_map(move |xs| {
                    PrototypeSet::from_flat(xs.into_iter().map(f64::from).collect(), d).unwrap()
                }),
                prop::collection::vec((0i32..5).prop_map(f64::from), d),
            )
        })
    }

    fn continuous() -> impl Strategy<Value = (PrototypeSet, Vec<f64>)> {
        (1usize..7, 1usize..4).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(0.0..1.0f64, n * d).prop_map(move |xs| PrototypeSet::from_flat(xs, d).unwrap()),
                prop::collection::vec(0.0..1.0f64, d),
            )
        })
    }

    fn params() -> impl Strategy<Value = (f64, Vec<f64>, Vec<f64>)> {
        (
            prop_oneof![Just(0.0), 0.0..3.0f64],
            prop::collection::vec(0.0..=1.0f64, 6),
            prop::collection::vec(prop_oneof![Just(0.0), 0.0..3.0f64], 6),
        )
    }

    proptest! {
        #[test]
        fn psi_is_bounded_and_winners_partition(
            (w, v) in prop_oneof![lattice(), continuous()],
            (sigma, eps, sigmas) in params(),
        ) {
            let n = w.n();
            let winners: u32 = (0..n).map(|p| u32::from(winner_selector(&w, &v, p).unwrap())).sum();
            prop_assert_eq!(winners, 1);
            for spec in specs(n, sigma, &eps, &sigmas) {
                for x in psi_all(&spec, &w, &v).unwrap() {
                    prop_assert!((0.0..=1.0).contains(&x), "{} gave {x}", spec.name());
                }
            }
        }

        /// Integer squared distances and shifts keep every sum exact.
        #[test]
        fn psi_depends_only_on_distance_differences(
            (w, v) in lattice(),
            c in -20i32..20,
            (sigma, eps, sigmas) in params(),
        ) {
            let mut sq = vec![0.0; w.n()];
            w.squared_distances_into(&v, &mut sq);
            let low = sq.iter().cloned().fold(f64::INFINITY, f64::min);
            let shifted: Vec<f64> = sq.iter().map(|d| d + f64::from(c).max(-low)).collect();
            for spec in specs(w.n(), sigma, &eps, &sigmas) {
                prop_assert_eq!(
                    psi_from_squared(&spec, &sq).unwrap(),
                    psi_from_squared(&spec, &shifted).unwrap(),
                    "{}", spec.name()
                );
            }
        }

        /// Power-of-two scales about a lattice center are exact in floating point.
        #[test]
        fn ranks_are_scale_covariant(
            (w, v) in lattice(),
            k in -3i32..4,
            center in prop::collection::vec(0i32..5, 3),
        ) {
            let s = 2f64.powi(k);
            let d = w.dim();
            let scale = |x: &[f64]| -> Vec<f64> {
                x.iter().zip(&center).map(|(xi, c)| f64::from(*c) + s * (xi - f64::from(*c))).collect()
            };
            let ws = PrototypeSet::new(w.points().map(scale).collect()).unwrap();
            let vs = scale(&v);
            prop_assert_eq!(ws.dim(), d);
            for p in 0..w.n() {
                prop_assert_eq!(rank(&w, &v, p).unwrap(), rank(&ws, &vs, p).unwrap());
            }
        }

        #[test]
        fn psi_is_locally_constant_on_separated_points(
            (w, v) in continuous(),
            (sigma, eps, sigmas) in params(),
            dirs in prop::collection::vec(-1.0..1.0f64, 18),
            r in 0.0..1.0f64,
        ) {
            let cp = perturbation_bound(0.05, (w.dim() as f64).sqrt()).unwrap();
            let mut sq = vec![0.0; w.n()];
            w.squared_distances_into(&v, &mut sq);
            let separated = (0..sq.len())
                .all(|a| (0..sq.len()).all(|b| a == b || (sq[a] - sq[b]).abs() > cp.theta()));
            prop_assume!(separated);
            let zeta = &dirs[..w.n() * w.dim()];
            let norm = zeta.iter().map(|z| z * z).sum::<f64>().sqrt();
            prop_assume!(norm > 1e-6);
            let zeta: Vec<f64> = zeta.iter().map(|z| z / norm * r * cp.nu() * 0.999).collect();
            let moved = w.perturbed(&zeta);
            for spec in specs(w.n(), sigma, &eps, &sigmas) {
                prop_assert_eq!(psi_all(&spec, &w, &v).unwrap(), psi_all(&spec, &moved, &v).unwrap());
            }
        }
    }
}
