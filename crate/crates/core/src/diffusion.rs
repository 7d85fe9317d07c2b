//! Independent-cascade diffusion through its live-edge representation.
//!
//! Each edge is live independently with its activation probability and
//! the steady state of a seed set is the set of nodes reachable from it
//! over live edges. [`exact_law`] enumerates every live-edge
//! configuration for small graphs; [`simulate_rounds`] is a separate
//! round-by-round cascade simulator kept as a cross-check.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DirectedGraph, ExposureSpec, NodeId, SeedSet, Sign};
use crate::rng::RngStream;

/// Largest number of uncertain edges (0 < p < 1) [`exact_law`] enumerates.
pub const EXACT_EDGE_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiveEdgeSample {
    live: Vec<bool>,
}

impl LiveEdgeSample {
    pub fn new(g: &DirectedGraph, live: Vec<bool>) -> Result<Self> {
        if live.len() != g.edge_count() {
            return Err(Error::LengthMismatch {
                expected: g.edge_count(),
                got: live.len(),
            });
        }
        Ok(Self { live })
    }

    pub fn live(&self) -> &[bool] {
        &self.live
    }

    pub fn live_count(&self) -> usize {
        self.live.iter().filter(|&&l| l).count()
    }
}

/// Draw each edge live independently with its probability.
pub fn sample_live_edges<R: Rng + ?Sized>(g: &DirectedGraph, rng: &mut R) -> LiveEdgeSample {
    LiveEdgeSample {
        live: g
            .edges()
            .iter()
            .map(|e| rng.random::<f64>() < e.p)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteadyState {
    pub z_inf: Vec<bool>,
}

impl SteadyState {
    pub fn active_count(&self) -> usize {
        self.z_inf.iter().filter(|&&a| a).count()
    }
}

/// Mark everything reachable from `from` over live edges. Nodes already
/// marked in `active` are treated as visited, so this also extends an
/// existing steady state by one more seed.
pub(crate) fn spread(
    g: &DirectedGraph,
    live: &[bool],
    from: &[NodeId],
    active: &mut [bool],
    stack: &mut Vec<NodeId>,
) {
    stack.clear();
    for &s in from {
        if !active[s] {
            active[s] = true;
            stack.push(s);
        }
    }
    while let Some(u) = stack.pop() {
        for &e in g.out_edges(u) {
            if live[e] {
                let w = g.edges()[e].dst;
                if !active[w] {
                    active[w] = true;
                    stack.push(w);
                }
            }
        }
    }
}

/// Steady-state activation: reachability from the seeds over live edges.
pub fn steady_state(
    seeds: &SeedSet,
    g: &DirectedGraph,
    live: &LiveEdgeSample,
) -> Result<SteadyState> {
    if live.live.len() != g.edge_count() {
        return Err(Error::LengthMismatch {
            expected: g.edge_count(),
            got: live.live.len(),
        });
    }
    if let Some(&bad) = seeds.members().iter().find(|&&v| v >= g.n()) {
        return Err(Error::NodeOutOfRange {
            node: bad,
            n: g.n(),
        });
    }
    let mut z = vec![false; g.n()];
    spread(g, &live.live, seeds.members(), &mut z, &mut Vec::new());
    Ok(SteadyState { z_inf: z })
}

/// Round-by-round independent cascade: every newly activated node gets a
/// single chance to activate each inactive out-neighbour in the next round.
pub fn simulate_rounds<R: Rng + ?Sized>(
    seeds: &SeedSet,
    g: &DirectedGraph,
    rng: &mut R,
) -> SteadyState {
    let mut active = vec![false; g.n()];
    let mut frontier: Vec<NodeId> = Vec::new();
    for &s in seeds.members() {
        active[s] = true;
        frontier.push(s);
    }
    let mut next = Vec::new();
    while !frontier.is_empty() {
        for &u in &frontier {
            for &e in g.out_edges(u) {
                let edge = g.edges()[e];
                if !active[edge.dst] && rng.random::<f64>() < edge.p {
                    active[edge.dst] = true;
                    next.push(edge.dst);
                }
            }
        }
        std::mem::swap(&mut frontier, &mut next);
        next.clear();
    }
    SteadyState { z_inf: active }
}

/// Monte-Carlo estimate of expected steady-state exposure counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureEstimate {
    /// Seed set the estimate was produced for.
    pub seeds: Vec<NodeId>,
    pub r: usize,
    pub k_hat_pos: Vec<f64>,
    pub k_hat_neg: Vec<f64>,
    /// Unbiased sample variances; absent when `r == 1`.
    pub var_pos: Option<Vec<f64>>,
    pub var_neg: Option<Vec<f64>>,
    /// Upper bounds `|N_i^±|` on the per-draw counts.
    pub m_pos: Vec<usize>,
    pub m_neg: Vec<usize>,
}

impl ExposureEstimate {
    pub fn k_hat(&self, sign: Sign) -> &[f64] {
        match sign {
            Sign::Pos => &self.k_hat_pos,
            Sign::Neg => &self.k_hat_neg,
        }
    }

    pub fn var(&self, sign: Sign) -> Option<&[f64]> {
        match sign {
            Sign::Pos => self.var_pos.as_deref(),
            Sign::Neg => self.var_neg.as_deref(),
        }
    }

    pub fn bound(&self, sign: Sign) -> &[usize] {
        match sign {
            Sign::Pos => &self.m_pos,
            Sign::Neg => &self.m_neg,
        }
    }
}

/// Integer count sums, so any reduction order gives identical results.
#[derive(Clone)]
pub(crate) struct CountSums {
    pub sum_pos: Vec<u64>,
    pub sum_neg: Vec<u64>,
    pub sq_pos: Vec<u64>,
    pub sq_neg: Vec<u64>,
}

impl CountSums {
    pub fn new(n: usize) -> Self {
        Self {
            sum_pos: vec![0; n],
            sum_neg: vec![0; n],
            sq_pos: vec![0; n],
            sq_neg: vec![0; n],
        }
    }

    pub fn add(&mut self, z: &[bool], spec: &ExposureSpec) {
        for i in 0..spec.n() {
            let kp = spec.pos(i).iter().filter(|&&j| z[j]).count() as u64;
            let kn = spec.neg(i).iter().filter(|&&j| z[j]).count() as u64;
            self.sum_pos[i] += kp;
            self.sq_pos[i] += kp * kp;
            self.sum_neg[i] += kn;
            self.sq_neg[i] += kn * kn;
        }
    }

    pub fn merge(mut self, other: Self) -> Self {
        for (a, b) in [
            (&mut self.sum_pos, &other.sum_pos),
            (&mut self.sum_neg, &other.sum_neg),
            (&mut self.sq_pos, &other.sq_pos),
            (&mut self.sq_neg, &other.sq_neg),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        self
    }

    pub fn means(sums: &[u64], r: usize) -> Vec<f64> {
        sums.iter().map(|&s| s as f64 / r as f64).collect()
    }

    fn variances(sums: &[u64], squares: &[u64], r: usize) -> Option<Vec<f64>> {
        if r < 2 {
            return None;
        }
        let r128 = r as u128;
        Some(
            sums.iter()
                .zip(squares)
                .map(|(&s, &q)| {
                    // R * sum(x^2) - (sum x)^2 is exact in integers.
                    let num = r128 * q as u128 - (s as u128) * (s as u128);
                    num as f64 / (r128 * (r128 - 1)) as f64
                })
                .collect(),
        )
    }

    pub fn into_estimate(self, seeds: &SeedSet, spec: &ExposureSpec, r: usize) -> ExposureEstimate {
        ExposureEstimate {
            seeds: seeds.members().to_vec(),
            r,
            k_hat_pos: Self::means(&self.sum_pos, r),
            k_hat_neg: Self::means(&self.sum_neg, r),
            var_pos: Self::variances(&self.sum_pos, &self.sq_pos, r),
            var_neg: Self::variances(&self.sum_neg, &self.sq_neg, r),
            m_pos: (0..spec.n()).map(|i| spec.pos(i).len()).collect(),
            m_neg: (0..spec.n()).map(|i| spec.neg(i).len()).collect(),
        }
    }
}

/// Average exposure counts over `r` independent live-edge draws.
///
/// Replicate `j` draws from `stream.child(j)`, so the estimate does not
/// depend on the number of worker threads.
pub fn mc_exposures(
    seeds: &SeedSet,
    g: &DirectedGraph,
    spec: &ExposureSpec,
    r: usize,
    stream: &RngStream,
) -> Result<ExposureEstimate> {
    if r == 0 {
        return Err(Error::Precondition(
            "sample count R must be at least 1".into(),
        ));
    }
    if spec.n() != g.n() {
        return Err(Error::LengthMismatch {
            expected: g.n(),
            got: spec.n(),
        });
    }
    if let Some(&bad) = seeds.members().iter().find(|&&v| v >= g.n()) {
        return Err(Error::NodeOutOfRange {
            node: bad,
            n: g.n(),
        });
    }
    let n = g.n();
    let sums = (0..r)
        .into_par_iter()
        .fold(
            || (CountSums::new(n), vec![false; n], Vec::new()),
            |(mut acc, mut z, mut stack), rep| {
                let mut rng = stream.child(rep as u64).rng();
                let live = sample_live_edges(g, &mut rng);
                z.iter_mut().for_each(|a| *a = false);
                spread(g, &live.live, seeds.members(), &mut z, &mut stack);
                acc.add(&z, spec);
                (acc, z, stack)
            },
        )
        .map(|(acc, _, _)| acc)
        .reduce(|| CountSums::new(n), CountSums::merge);
    Ok(sums.into_estimate(seeds, spec, r))
}

/// Exact exposure moments of one node under the diffusion law.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExposureMoments {
    /// `k^± = E[K^±]`.
    pub k_pos: f64,
    pub k_neg: f64,
    /// `E[U^±]`, the expected number of active non-seed sources.
    pub eu_pos: f64,
    pub eu_neg: f64,
    /// `E[U^±(U^± - 1)]`.
    pub eu2_pos: f64,
    pub eu2_neg: f64,
    pub var_pos: f64,
    pub var_neg: f64,
}

impl ExposureMoments {
    pub fn k(&self, sign: Sign) -> f64 {
        match sign {
            Sign::Pos => self.k_pos,
            Sign::Neg => self.k_neg,
        }
    }

    pub fn eu(&self, sign: Sign) -> f64 {
        match sign {
            Sign::Pos => self.eu_pos,
            Sign::Neg => self.eu_neg,
        }
    }

    pub fn eu2(&self, sign: Sign) -> f64 {
        match sign {
            Sign::Pos => self.eu2_pos,
            Sign::Neg => self.eu2_neg,
        }
    }

    pub fn var(&self, sign: Sign) -> f64 {
        match sign {
            Sign::Pos => self.var_pos,
            Sign::Neg => self.var_neg,
        }
    }
}

/// The exact distribution of the steady state of one seed set.
///
/// The support is stored sparsely: one entry per distinct steady state,
/// encoded as a bitmask over nodes, sorted by mask.
#[derive(Debug, Clone)]
pub struct ExactDiffusionLaw {
    n: usize,
    seeds: Vec<NodeId>,
    support: Vec<(u64, f64)>,
    marginals: Vec<f64>,
    joint: Vec<Vec<f64>>,
    exposure: Vec<ExposureMoments>,
}

fn node_mask(nodes: &[NodeId]) -> u64 {
    nodes.iter().fold(0u64, |m, &v| m | (1u64 << v))
}

/// Enumerate every live-edge configuration and group them by steady state.
///
/// Edges with `p = 1` are always live and edges with `p = 0` never are,
/// so only the uncertain edges count towards [`EXACT_EDGE_LIMIT`].
pub fn exact_law(
    seeds: &SeedSet,
    g: &DirectedGraph,
    spec: &ExposureSpec,
) -> Result<ExactDiffusionLaw> {
    exact_law_with_limit(seeds, g, spec, EXACT_EDGE_LIMIT)
}

pub fn exact_law_with_limit(
    seeds: &SeedSet,
    g: &DirectedGraph,
    spec: &ExposureSpec,
    edge_limit: usize,
) -> Result<ExactDiffusionLaw> {
    let n = g.n();
    if n > 64 {
        return Err(Error::guard("nodes for exact enumeration", n as u128, 64));
    }
    if spec.n() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: spec.n(),
        });
    }
    if let Some(&bad) = seeds.members().iter().find(|&&v| v >= n) {
        return Err(Error::NodeOutOfRange { node: bad, n });
    }
    let uncertain: Vec<usize> = (0..g.edge_count())
        .filter(|&e| {
            let p = g.edges()[e].p;
            p > 0.0 && p < 1.0
        })
        .collect();
    if uncertain.len() > edge_limit {
        return Err(Error::guard(
            "uncertain edges for exact enumeration",
            uncertain.len() as u128,
            edge_limit as u128,
        ));
    }

    // Per node: (bit of the edge in the configuration mask or None when
    // certainly live, destination).
    let mut out: Vec<Vec<(Option<u32>, usize)>> = vec![Vec::new(); n];
    for (e, edge) in g.edges().iter().enumerate() {
        if edge.p >= 1.0 {
            out[edge.src].push((None, edge.dst));
        } else if let Some(bit) = uncertain.iter().position(|&u| u == e) {
            out[edge.src].push((Some(bit as u32), edge.dst));
        }
    }

    // Configuration probabilities as a product of two half tables.
    let m = uncertain.len();
    let lo_bits = m / 2;
    let half_table = |edges: &[usize]| -> Vec<f64> {
        let mut table = vec![1.0f64; 1usize << edges.len()];
        for (mask, slot) in table.iter_mut().enumerate() {
            for (b, &e) in edges.iter().enumerate() {
                let p = g.edges()[e].p;
                *slot *= if mask >> b & 1 == 1 { p } else { 1.0 - p };
            }
        }
        table
    };
    let lo = half_table(&uncertain[..lo_bits]);
    let hi = half_table(&uncertain[lo_bits..]);

    let seed_mask = node_mask(seeds.members());
    let mut grouped: HashMap<u64, f64> = HashMap::new();
    for config in 0u64..(1u64 << m) {
        let prob =
            lo[(config & ((1u64 << lo_bits) - 1)) as usize] * hi[(config >> lo_bits) as usize];
        if prob == 0.0 {
            continue;
        }
        let mut reached = seed_mask;
        let mut frontier = seed_mask;
        while frontier != 0 {
            let u = frontier.trailing_zeros() as usize;
            frontier &= frontier - 1;
            for &(bit, w) in &out[u] {
                let is_live = bit.is_none_or(|b| config >> b & 1 == 1);
                if is_live && reached >> w & 1 == 0 {
                    reached |= 1u64 << w;
                    frontier |= 1u64 << w;
                }
            }
        }
        *grouped.entry(reached).or_insert(0.0) += prob;
    }
    let mut support: Vec<(u64, f64)> = grouped.into_iter().collect();
    support.sort_unstable_by_key(|&(mask, _)| mask);

    let mut marginals = vec![0.0; n];
    let mut joint = vec![vec![0.0; n]; n];
    for &(mask, p) in &support {
        let mut bits = mask;
        while bits != 0 {
            let v = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            marginals[v] += p;
            let mut rest = mask;
            while rest != 0 {
                let w = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                joint[v][w] += p;
            }
        }
    }

    let exposure = (0..n)
        .map(|i| {
            let mut mom = ExposureMoments::default();
            for sign in Sign::BOTH {
                let src = node_mask(spec.sources(sign, i));
                let (mut ek, mut ek2, mut eu, mut eu2) = (0.0, 0.0, 0.0, 0.0);
                for &(mask, p) in &support {
                    let k = f64::from((mask & src).count_ones());
                    let u = f64::from((mask & src & !seed_mask).count_ones());
                    ek += p * k;
                    ek2 += p * k * k;
                    eu += p * u;
                    eu2 += p * u * (u - 1.0);
                }
                let var = (ek2 - ek * ek).max(0.0);
                match sign {
                    Sign::Pos => {
                        mom.k_pos = ek;
                        mom.eu_pos = eu;
                        mom.eu2_pos = eu2;
                        mom.var_pos = var;
                    }
                    Sign::Neg => {
                        mom.k_neg = ek;
                        mom.eu_neg = eu;
                        mom.eu2_neg = eu2;
                        mom.var_neg = var;
                    }
                }
            }
            mom
        })
        .collect();

    Ok(ExactDiffusionLaw {
        n,
        seeds: seeds.members().to_vec(),
        support,
        marginals,
        joint,
        exposure,
    })
}

impl ExactDiffusionLaw {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn seeds(&self) -> &[NodeId] {
        &self.seeds
    }

    /// `(steady-state bitmask, probability)` pairs.
    pub fn support(&self) -> &[(u64, f64)] {
        &self.support
    }

    /// The support with each steady state expanded to a vector.
    pub fn support_vectors(&self) -> Vec<(Vec<bool>, f64)> {
        self.support
            .iter()
            .map(|&(mask, p)| ((0..self.n).map(|v| mask >> v & 1 == 1).collect(), p))
            .collect()
    }

    pub fn total_probability(&self) -> f64 {
        self.support.iter().map(|&(_, p)| p).sum()
    }

    /// `P(z_v = 1)`.
    pub fn marginal(&self, v: NodeId) -> f64 {
        self.marginals[v]
    }

    pub fn marginals(&self) -> &[f64] {
        &self.marginals
    }

    /// `P(z_v = 1, z_w = 1)`.
    pub fn joint(&self, v: NodeId, w: NodeId) -> f64 {
        self.joint[v][w]
    }

    pub fn exposure(&self, i: NodeId) -> &ExposureMoments {
        &self.exposure[i]
    }

    pub fn exposures(&self) -> &[ExposureMoments] {
        &self.exposure
    }

    /// Expected exposure counts `k^±` for every node.
    pub fn k(&self, sign: Sign) -> Vec<f64> {
        self.exposure.iter().map(|m| m.k(sign)).collect()
    }

    /// `E[h(z)]` for a function of the steady-state bitmask.
    pub fn expectation<F: FnMut(u64) -> f64>(&self, mut h: F) -> f64 {
        self.support.iter().map(|&(mask, p)| p * h(mask)).sum()
    }
}

/// A fixed collection of live-edge draws, so that an estimator built on
/// it is a deterministic function of the seed set.
///
/// Draw `j` comes from `stream.child(j)`, matching [`mc_exposures`]: for
/// the same stream, [`LiveEdgeBank::estimate`] reproduces it exactly.
#[derive(Debug, Clone)]
pub struct LiveEdgeBank {
    samples: Vec<LiveEdgeSample>,
}

impl LiveEdgeBank {
    pub fn draw(g: &DirectedGraph, r: usize, stream: &RngStream) -> Result<Self> {
        if r == 0 {
            return Err(Error::Precondition(
                "sample count R must be at least 1".into(),
            ));
        }
        let samples = (0..r)
            .into_par_iter()
            .map(|j| sample_live_edges(g, &mut stream.child(j as u64).rng()))
            .collect();
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[LiveEdgeSample] {
        &self.samples
    }

    /// Steady state of `seeds` in every draw.
    pub fn steady_states(&self, seeds: &[NodeId], g: &DirectedGraph) -> Vec<Vec<bool>> {
        self.samples
            .par_iter()
            .map(|s| {
                let mut z = vec![false; g.n()];
                spread(g, &s.live, seeds, &mut z, &mut Vec::new());
                z
            })
            .collect()
    }

    /// Exposure estimate of `seeds` over the bank.
    pub fn estimate(
        &self,
        seeds: &SeedSet,
        g: &DirectedGraph,
        spec: &ExposureSpec,
    ) -> Result<ExposureEstimate> {
        if let Some(&bad) = seeds.members().iter().find(|&&v| v >= g.n()) {
            return Err(Error::NodeOutOfRange {
                node: bad,
                n: g.n(),
            });
        }
        if spec.n() != g.n() {
            return Err(Error::LengthMismatch {
                expected: g.n(),
                got: spec.n(),
            });
        }
        Ok(self.estimate_from(&[], seeds.members(), g, spec, seeds))
    }

    /// Like [`estimate`](Self::estimate) for `base ∪ extra`, reusing the
    /// cached steady states of `base` when given.
    pub(crate) fn estimate_from(
        &self,
        base: &[Vec<bool>],
        extra: &[NodeId],
        g: &DirectedGraph,
        spec: &ExposureSpec,
        seeds: &SeedSet,
    ) -> ExposureEstimate {
        let n = g.n();
        let sums = self
            .samples
            .par_iter()
            .enumerate()
            .fold(
                || (CountSums::new(n), Vec::new(), Vec::new()),
                |(mut acc, mut z, mut stack), (j, s)| {
                    match base.get(j) {
                        Some(b) => {
                            z.clear();
                            z.extend_from_slice(b);
                        }
                        None => {
                            z.clear();
                            z.resize(n, false);
                        }
                    }
                    spread(g, &s.live, extra, &mut z, &mut stack);
                    acc.add(&z, spec);
                    (acc, z, stack)
                },
            )
            .map(|(acc, _, _)| acc)
            .reduce(|| CountSums::new(n), CountSums::merge);
        sums.into_estimate(seeds, spec, self.samples.len())
    }

    /// Mean number of active nodes over the bank.
    pub fn mean_reach(&self, seeds: &[NodeId], g: &DirectedGraph) -> f64 {
        let total: usize = self
            .samples
            .par_iter()
            .map(|s| {
                let mut z = vec![false; g.n()];
                spread(g, &s.live, seeds, &mut z, &mut Vec::new());
                z.iter().filter(|&&a| a).count()
            })
            .sum();
        total as f64 / self.samples.len() as f64
    }
}

/// Bernstein confidence radius for a mean of `r` draws bounded in `[0, M]`.
pub fn bernstein_radius(variance: f64, m: f64, r: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Precondition(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    if variance < 0.0 || !variance.is_finite() {
        return Err(Error::Precondition(format!(
            "variance must be nonnegative, got {variance}"
        )));
    }
    if m <= 0.0 || r == 0 {
        return Err(Error::Precondition(
            "bound M must be positive and R at least 1".into(),
        ));
    }
    let log_term = (2.0 / delta).ln();
    let r = r as f64;
    Ok((2.0 * variance * log_term / r).sqrt() + 2.0 * m * log_term / (3.0 * r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Edge;

    fn graph(n: usize, edges: &[(usize, usize, f64)]) -> DirectedGraph {
        DirectedGraph::new(
            n,
            edges
                .iter()
                .map(|&(src, dst, p)| Edge { src, dst, p })
                .collect(),
        )
        .unwrap()
    }

    fn seeds(members: &[usize], n: usize) -> SeedSet {
        SeedSet::exact(members.to_vec(), n).unwrap()
    }

    #[test]
    fn degenerate_probabilities_are_deterministic() {
        let zero = graph(3, &[(0, 1, 0.0), (1, 2, 0.0)]);
        let one = graph(3, &[(0, 1, 1.0), (1, 2, 1.0)]);
        let mut rng = RngStream::new(5).rng();
        for _ in 0..100 {
            assert_eq!(sample_live_edges(&zero, &mut rng).live_count(), 0);
            assert_eq!(sample_live_edges(&one, &mut rng).live_count(), 2);
        }
    }

    #[test]
    fn live_fraction_matches_probability() {
        let g = graph(3, &[(0, 1, 0.3), (1, 2, 0.3), (2, 0, 0.3)]);
        let mut rng = RngStream::new(11).rng();
        let draws = 100_000;
        let mut hits = [0usize; 3];
        for _ in 0..draws {
            for (h, &l) in hits.iter_mut().zip(sample_live_edges(&g, &mut rng).live()) {
                *h += usize::from(l);
            }
        }
        for h in hits {
            assert!((h as f64 / draws as f64 - 0.3).abs() < 0.01);
        }
    }

    #[test]
    fn steady_state_examples() {
        let g = graph(3, &[(0, 1, 0.5), (1, 2, 0.5)]);
        let s = seeds(&[0], 3);
        let none = LiveEdgeSample::new(&g, vec![false, false]).unwrap();
        assert_eq!(
            steady_state(&s, &g, &none).unwrap().z_inf,
            vec![true, false, false]
        );
        let all = LiveEdgeSample::new(&g, vec![true, true]).unwrap();
        assert_eq!(steady_state(&s, &g, &all).unwrap().z_inf, vec![true; 3]);
        let first = LiveEdgeSample::new(&g, vec![true, false]).unwrap();
        assert_eq!(
            steady_state(&s, &g, &first).unwrap().z_inf,
            vec![true, true, false]
        );
        assert!(LiveEdgeSample::new(&g, vec![true]).is_err());
    }

    #[test]
    fn mc_exposures_edge_cases() {
        let g = graph(3, &[(0, 1, 0.0), (1, 2, 0.0)]);
        let spec =
            ExposureSpec::new(3, vec![vec![1], vec![0], vec![0, 1]], vec![vec![]; 3]).unwrap();
        let s = seeds(&[0, 1], 3);
        let est = mc_exposures(&s, &g, &spec, 50, &RngStream::new(1)).unwrap();
        assert_eq!(est.k_hat_pos, vec![1.0, 1.0, 2.0]);
        assert!(est.var_pos.as_ref().unwrap().iter().all(|&v| v == 0.0));

        let unseeded = seeds(&[2], 3);
        let est = mc_exposures(&unseeded, &g, &spec, 50, &RngStream::new(1)).unwrap();
        assert_eq!(est.k_hat_pos[0], 0.0);

        let single = mc_exposures(&s, &g, &spec, 1, &RngStream::new(1)).unwrap();
        assert!(single.var_pos.is_none());
        assert!(mc_exposures(&s, &g, &spec, 0, &RngStream::new(1)).is_err());
    }

    #[test]
    fn mc_exposures_are_reproducible() {
        let g = graph(4, &[(0, 1, 0.4), (1, 2, 0.4), (0, 3, 0.2), (3, 2, 0.7)]);
        let spec = ExposureSpec::in_neighbors(&g);
        let s = seeds(&[0], 4);
        let a = mc_exposures(&s, &g, &spec, 5000, &RngStream::new(9)).unwrap();
        let b = mc_exposures(&s, &g, &spec, 5000, &RngStream::new(9)).unwrap();
        assert_eq!(a, b);
        let c = mc_exposures(&s, &g, &spec, 5000, &RngStream::new(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn exact_law_single_edge() {
        let g = graph(2, &[(0, 1, 0.37)]);
        let law = exact_law(&seeds(&[0], 2), &g, &ExposureSpec::empty(2)).unwrap();
        assert!((law.marginal(1) - 0.37).abs() < 1e-15);
        assert_eq!(law.support().len(), 2);
    }

    #[test]
    fn exact_law_diamond() {
        let (p1, p2, p3) = (0.3, 0.6, 0.45);
        let g = graph(3, &[(0, 1, p1), (0, 2, p2), (2, 1, p3)]);
        let law = exact_law(&seeds(&[0], 3), &g, &ExposureSpec::empty(3)).unwrap();
        let expected = 1.0 - (1.0 - p1) * (1.0 - p2 * p3);
        assert!((law.marginal(1) - expected).abs() < 1e-14);
        assert!((law.total_probability() - 1.0).abs() < 1e-12);
        assert!((law.joint(1, 2) - p2 * (p1 + (1.0 - p1) * p3)).abs() < 1e-14);
    }

    #[test]
    fn everything_seeded() {
        let g = graph(3, &[(0, 1, 0.3), (1, 2, 0.3)]);
        let spec = ExposureSpec::new(
            3,
            vec![vec![1, 2], vec![0], vec![1]],
            vec![vec![2], vec![], vec![]],
        )
        .unwrap();
        let law = exact_law(&seeds(&[0, 1, 2], 3), &g, &spec).unwrap();
        assert!(law.marginals().iter().all(|&m| (m - 1.0).abs() < 1e-15));
        for m in law.exposures() {
            assert_eq!(m.eu_pos, 0.0);
            assert_eq!(m.eu_neg, 0.0);
        }
        assert!((law.exposure(0).k_pos - 2.0).abs() < 1e-12);
    }

    #[test]
    fn exact_law_guard() {
        let edges: Vec<(usize, usize, f64)> = (0..22).map(|i| (i, i + 1, 0.5)).collect();
        let g = graph(23, &edges);
        let err = exact_law(&seeds(&[0], 23), &g, &ExposureSpec::empty(23)).unwrap_err();
        assert!(err.is_resource_guard());
        // Certain edges do not count.
        let certain: Vec<(usize, usize, f64)> = (0..30).map(|i| (i, i + 1, 1.0)).collect();
        let g = graph(31, &certain);
        let law = exact_law(&seeds(&[0], 31), &g, &ExposureSpec::empty(31)).unwrap();
        assert_eq!(law.support().len(), 1);
    }

    #[test]
    fn bernstein_radius_examples() {
        let r = bernstein_radius(0.0, 1.0, 100, 0.1).unwrap();
        assert!((r - 2.0 * 20f64.ln() / 300.0).abs() < 1e-15);
        assert!((r - 0.019973).abs() < 5e-6);
        let mut prev = f64::INFINITY;
        for reps in [1, 10, 100, 1000, 10_000] {
            let cur = bernstein_radius(0.3, 2.0, reps, 0.05).unwrap();
            assert!(cur < prev);
            prev = cur;
        }
        let first = |v: f64| {
            bernstein_radius(v, 1.0, 50, 0.2).unwrap()
                - bernstein_radius(0.0, 1.0, 50, 0.2).unwrap()
        };
        assert!((first(0.8) / first(0.4) - 2f64.sqrt()).abs() < 1e-12);
        assert!(bernstein_radius(0.1, 1.0, 10, 1.0).is_err());
        assert!(bernstein_radius(0.1, 1.0, 10, 0.0).is_err());
    }

    #[test]
    fn bank_reproduces_mc_exposures() {
        let g = graph(4, &[(0, 1, 0.4), (1, 2, 0.6), (0, 3, 0.3), (3, 2, 0.5)]);
        let spec = ExposureSpec::in_neighbors(&g);
        let stream = RngStream::new(11);
        let s = seeds(&[0], 4);
        let bank = LiveEdgeBank::draw(&g, 500, &stream).unwrap();
        let direct = mc_exposures(&s, &g, &spec, 500, &stream).unwrap();
        assert_eq!(bank.estimate(&s, &g, &spec).unwrap(), direct);

        // Extending cached steady states gives the same answer as a fresh run.
        let base = bank.steady_states(&[0], &g);
        let both = seeds(&[0, 3], 4);
        let extended = bank.estimate_from(&base, &[3], &g, &spec, &both);
        assert_eq!(extended, bank.estimate(&both, &g, &spec).unwrap());
    }
}
