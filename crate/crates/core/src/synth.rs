//! Synthetic instances, logged experiments and parameter sweeps.
//!
//! Everything here is a deterministic function of the configuration and
//! its `master_seed`.

use std::collections::HashMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{exact_law, sample_live_edges, LiveEdgeBank, EXACT_EDGE_LIMIT};
use crate::error::{Error, Result};
use crate::estimand::welfare_under_law;
use crate::graph::{
    binomial, exposure_counts, DirectedGraph, Edge, ExposureSpec, KSubsets, NodeId, SeedSet,
};
use crate::response::{
    fit_shape_constrained, FitOptions, LoggedDataset, NodeRow, Replication, ResponseCurve,
    ResponseModel, StratumResponse,
};
use crate::rng::{RngStream, SimRng};
use crate::selection::{baseline_select, greedy_cim, Baseline, GreedyOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphFamily {
    /// Each ordered pair is an edge independently with probability `p`.
    ErdosRenyi { p: f64 },
    /// Preferential attachment with `m` links per new node, both directions.
    BarabasiAlbert { m: usize },
    /// Ring lattice with `k` neighbours rewired with probability `beta`,
    /// both directions.
    WattsStrogatz { k: usize, beta: f64 },
    /// `0 -> 1 -> ... -> n-1`.
    Path,
    /// `0 -> i` for every other node.
    Star,
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    #[serde(flatten)]
    pub family: GraphFamily,
    pub n: usize,
    /// Edge probabilities are uniform on `[p_min, p_max]` before scaling.
    pub p_min: f64,
    pub p_max: f64,
    #[serde(default = "default_scale")]
    pub epsilon_scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExposureConfig {
    /// Each in-neighbour becomes a negative source with this probability
    /// and a positive source otherwise.
    #[serde(default)]
    pub neg_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseProfile {
    /// `f(t) = c t`.
    Linear,
    /// Saturating `f(t) = A (1 - (1 - q)^t)` with curvature `A q^2 = kappa`.
    Concave,
    /// Concave positive and negative curves.
    Mixed,
}

fn default_amplitude() -> f64 {
    0.6
}

fn default_strata() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseConfig {
    pub profile: ResponseProfile,
    /// Target curvature of concave curves.
    #[serde(default)]
    pub kappa: f64,
    /// Upper end of `f+(B)`; each stratum draws from `[A/2, A]`.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Amplitude of the negative curves under the mixed profile.
    #[serde(default)]
    pub neg_amplitude: f64,
    /// Direct effects are uniform on `[0, alpha_max]`.
    #[serde(default)]
    pub alpha_max: f64,
    #[serde(default = "default_strata")]
    pub strata: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub noise_sigma: f64,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyConfig {
    /// Always the same seed set.
    Fixed { set: Vec<NodeId> },
    /// Uniform over an explicit list of distinct sets.
    Uniform { sets: Vec<Vec<NodeId>> },
    /// Explicit probabilities over a list of sets.
    Weighted {
        sets: Vec<Vec<NodeId>>,
        probabilities: Vec<f64>,
    },
    /// Softmax over a pool of random `k`-sets with score equal to the mean
    /// out-degree of the set divided by `temperature`.
    DegreeBiased {
        k: usize,
        pool: usize,
        temperature: f64,
    },
    /// Uniform over a pool of random `k`-sets.
    RandomPool { k: usize, pool: usize },
}

fn default_r() -> usize {
    200
}

fn default_eval_r() -> usize {
    2000
}

fn default_oracle_limit() -> u128 {
    5000
}

fn default_reps() -> usize {
    1
}

/// Settings of the fit-select-evaluate pipeline run by [`sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub k: usize,
    /// Draws per objective evaluation during selection.
    #[serde(default = "default_r")]
    pub r: usize,
    /// Draws for welfare evaluation when exact enumeration is infeasible.
    #[serde(default = "default_eval_r")]
    pub eval_r: usize,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub lazy: bool,
    /// Largest number of `K`-sets the oracle may enumerate.
    #[serde(default = "default_oracle_limit")]
    pub oracle_limit: u128,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    #[serde(default)]
    pub greedy_reach: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 0,
            r: default_r(),
            eval_r: default_eval_r(),
            lambda: 0.0,
            lazy: false,
            oracle_limit: default_oracle_limit(),
            repetitions: 1,
            greedy_reach: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub master_seed: u64,
    pub graph: GraphConfig,
    #[serde(default)]
    pub exposure: ExposureConfig,
    pub response: ResponseConfig,
    pub data: DataConfig,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.graph;
        let bad = |msg: String| Err(Error::Config(msg));
        if g.n == 0 {
            return bad("graph.n must be positive".into());
        }
        if !(g.epsilon_scale > 0.0 && g.epsilon_scale.is_finite()) {
            return bad("graph.epsilon_scale must be positive".into());
        }
        if !(0.0 <= g.p_min && g.p_min <= g.p_max && g.p_max <= 1.0) {
            return bad("graph.p_min and graph.p_max must satisfy 0 <= p_min <= p_max <= 1".into());
        }
        match g.family {
            GraphFamily::ErdosRenyi { p } if !(0.0..=1.0).contains(&p) => {
                return bad("graph.p must lie in [0, 1]".into())
            }
            GraphFamily::BarabasiAlbert { m } if m == 0 || m >= g.n => {
                return bad("graph.m must satisfy 1 <= m < n".into())
            }
            GraphFamily::WattsStrogatz { k, beta }
                if k == 0 || k % 2 == 1 || k >= g.n || !(0.0..=1.0).contains(&beta) =>
            {
                return bad("graph.k must be even with 2 <= k < n and graph.beta in [0, 1]".into())
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.exposure.neg_fraction) {
            return bad("exposure.neg_fraction must lie in [0, 1]".into());
        }
        let r = &self.response;
        if r.strata == 0 {
            return bad("response.strata must be positive".into());
        }
        for (name, v) in [
            ("kappa", r.kappa),
            ("amplitude", r.amplitude),
            ("neg_amplitude", r.neg_amplitude),
            ("alpha_max", r.alpha_max),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("response.{name} must be nonnegative"));
            }
        }
        if r.alpha_max + r.amplitude > 1.0 {
            log::warn!("alpha_max + amplitude exceeds 1; outcomes will be clipped");
        }
        if !(self.data.noise_sigma >= 0.0 && self.data.noise_sigma.is_finite()) {
            return bad("data.noise_sigma must be nonnegative".into());
        }
        if self.data.replications == 0 {
            return bad("data.replications must be at least 1".into());
        }
        if self.pipeline.r == 0 || self.pipeline.eval_r == 0 || self.pipeline.repetitions == 0 {
            return bad(
                "pipeline.r, pipeline.eval_r and pipeline.repetitions must be positive".into(),
            );
        }
        if self.pipeline.lambda < 0.0 {
            return bad("pipeline.lambda must be nonnegative".into());
        }
        Ok(())
    }
}

/// A ground-truth instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub graph: DirectedGraph,
    pub spec: ExposureSpec,
    pub model: ResponseModel,
}

fn draw_p(rng: &mut SimRng, cfg: &GraphConfig) -> f64 {
    if cfg.p_max > cfg.p_min {
        rng.random_range(cfg.p_min..=cfg.p_max)
    } else {
        cfg.p_min
    }
}

fn both_ways(pairs: impl IntoIterator<Item = (NodeId, NodeId)>) -> Vec<(NodeId, NodeId)> {
    let mut out: Vec<(NodeId, NodeId)> = pairs
        .into_iter()
        .flat_map(|(a, b)| [(a, b), (b, a)])
        .filter(|(a, b)| a != b)
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Topology of the configured family, as sorted `(src, dst)` pairs.
pub fn gen_topology(cfg: &GraphConfig, rng: &mut SimRng) -> Result<Vec<(NodeId, NodeId)>> {
    let n = cfg.n;
    let pairs = match cfg.family {
        GraphFamily::Path => (1..n).map(|i| (i - 1, i)).collect(),
        GraphFamily::Star => (1..n).map(|i| (0, i)).collect(),
        GraphFamily::ErdosRenyi { p } => {
            let mut v = Vec::new();
            for a in 0..n {
                for b in 0..n {
                    if a != b && rng.random::<f64>() < p {
                        v.push((a, b));
                    }
                }
            }
            v
        }
        GraphFamily::BarabasiAlbert { m } => {
            if m == 0 || m >= n {
                return Err(Error::Config("barabasi_albert needs 1 <= m < n".into()));
            }
            // Start from a clique on m + 1 nodes.
            let mut undirected = Vec::new();
            let mut targets: Vec<NodeId> = Vec::new();
            for a in 0..=m {
                for b in a + 1..=m {
                    undirected.push((a, b));
                    targets.push(a);
                    targets.push(b);
                }
            }
            for v in m + 1..n {
                let mut chosen: Vec<NodeId> = Vec::with_capacity(m);
                while chosen.len() < m {
                    let t = targets[rng.random_range(0..targets.len())];
                    if !chosen.contains(&t) {
                        chosen.push(t);
                    }
                }
                for &t in &chosen {
                    undirected.push((t, v));
                    targets.push(t);
                    targets.push(v);
                }
            }
            both_ways(undirected)
        }
        GraphFamily::WattsStrogatz { k, beta } => {
            if k == 0 || k % 2 == 1 || k >= n {
                return Err(Error::Config(
                    "watts_strogatz needs even k with 2 <= k < n".into(),
                ));
            }
            let mut adj: Vec<Vec<bool>> = vec![vec![false; n]; n];
            for a in 0..n {
                for j in 1..=k / 2 {
                    let b = (a + j) % n;
                    adj[a][b] = true;
                    adj[b][a] = true;
                }
            }
            for a in 0..n {
                for j in 1..=k / 2 {
                    let b = (a + j) % n;
                    if adj[a][b] && rng.random::<f64>() < beta {
                        let free: Vec<NodeId> = (0..n).filter(|&c| c != a && !adj[a][c]).collect();
                        if free.is_empty() {
                            continue;
                        }
                        let c = free[rng.random_range(0..free.len())];
                        adj[a][b] = false;
                        adj[b][a] = false;
                        adj[a][c] = true;
                        adj[c][a] = true;
                    }
                }
            }
            let mut v = Vec::new();
            for (a, row) in adj.iter().enumerate() {
                for (b, &e) in row.iter().enumerate() {
                    if e {
                        v.push((a, b));
                    }
                }
            }
            v
        }
    };
    Ok(pairs)
}

pub fn gen_graph(cfg: &GraphConfig, stream: &RngStream) -> Result<DirectedGraph> {
    let mut rng = stream.named("topology").rng();
    let pairs = gen_topology(cfg, &mut rng)?;
    let mut prng = stream.named("probabilities").rng();
    let edges = pairs
        .into_iter()
        .map(|(src, dst)| Edge {
            src,
            dst,
            p: draw_p(&mut prng, cfg),
        })
        .collect();
    DirectedGraph::new(cfg.n, edges)?.scaled(cfg.epsilon_scale)
}

/// Split in-neighbourhoods into positive and negative sources.
pub fn gen_spec(
    g: &DirectedGraph,
    cfg: &ExposureConfig,
    stream: &RngStream,
) -> Result<ExposureSpec> {
    let mut rng = stream.named("exposure").rng();
    let mut pos = vec![Vec::new(); g.n()];
    let mut neg = vec![Vec::new(); g.n()];
    for i in 0..g.n() {
        let mut sources: Vec<NodeId> = g.in_neighbors(i).collect();
        sources.sort_unstable();
        for j in sources {
            if cfg.neg_fraction > 0.0 && rng.random::<f64>() < cfg.neg_fraction {
                neg[i].push(j);
            } else {
                pos[i].push(j);
            }
        }
    }
    ExposureSpec::new(g.n(), pos, neg)
}

/// Saturating curve `A (1 - (1 - q)^t)` on `0..=b` with `A q^2 = kappa`.
pub fn saturating_curve(amplitude: f64, kappa: f64, b: usize) -> Result<ResponseCurve> {
    if amplitude <= 0.0 || b == 0 {
        return Ok(ResponseCurve::zero(b));
    }
    let q = (kappa / amplitude).sqrt().min(1.0);
    if q == 0.0 {
        return ResponseCurve::linear(amplitude / b as f64, b);
    }
    ResponseCurve::from_increments(
        &(0..b)
            .map(|t| amplitude * q * (1.0 - q).powi(t as i32))
            .collect::<Vec<_>>(),
    )
}

pub fn gen_model(
    spec: &ExposureSpec,
    cfg: &ResponseConfig,
    stream: &RngStream,
) -> Result<ResponseModel> {
    let n = spec.n();
    let mut rng = stream.named("response").rng();
    if cfg.strata > n {
        return Err(Error::Config(format!(
            "response.strata = {} exceeds n = {n}",
            cfg.strata
        )));
    }
    // Balanced labels, shuffled, so no stratum is empty.
    let mut strata: Vec<usize> = (0..n).map(|i| i % cfg.strata).collect();
    strata.shuffle(&mut rng);
    let mut responses = Vec::with_capacity(cfg.strata);
    for r in 0..cfg.strata {
        let members = (0..n).filter(|&i| strata[i] == r);
        let (b_pos, b_neg) = members.fold((1, 0), |(bp, bn), i| {
            (bp.max(spec.pos(i).len()), bn.max(spec.neg(i).len()))
        });
        let amp = cfg.amplitude * rng.random_range(0.5..=1.0);
        let alpha = if cfg.alpha_max > 0.0 {
            rng.random_range(0.0..=cfg.alpha_max)
        } else {
            0.0
        };
        let (f_pos, f_neg) = match cfg.profile {
            ResponseProfile::Linear => (
                ResponseCurve::linear(amp / b_pos as f64, b_pos)?,
                if b_neg > 0 && cfg.neg_amplitude > 0.0 {
                    ResponseCurve::linear(cfg.neg_amplitude / b_neg as f64, b_neg)?
                } else {
                    ResponseCurve::zero(b_neg)
                },
            ),
            ResponseProfile::Concave => (
                saturating_curve(amp, cfg.kappa, b_pos)?,
                ResponseCurve::zero(b_neg),
            ),
            ResponseProfile::Mixed => {
                let neg_amp = cfg.neg_amplitude * rng.random_range(0.5..=1.0);
                (
                    saturating_curve(amp, cfg.kappa, b_pos)?,
                    saturating_curve(neg_amp, cfg.kappa.min(neg_amp), b_neg)?,
                )
            }
        };
        responses.push(StratumResponse {
            alpha,
            f_pos,
            f_neg,
        });
    }
    ResponseModel::new(strata, responses)
}

/// Ground-truth graph, exposure spec and response model.
pub fn gen_instance(cfg: &SynthConfig) -> Result<Instance> {
    cfg.validate()?;
    let stream = RngStream::new(cfg.master_seed).named("instance");
    instance_from_stream(cfg, &stream)
}

fn instance_from_stream(cfg: &SynthConfig, stream: &RngStream) -> Result<Instance> {
    let graph = gen_graph(&cfg.graph, stream)?;
    let spec = gen_spec(&graph, &cfg.exposure, stream)?;
    let model = gen_model(&spec, &cfg.response, stream)?;
    Ok(Instance { graph, spec, model })
}

/// A logging policy resolved to an explicit distribution over seed sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPolicy {
    pub sets: Vec<Vec<NodeId>>,
    pub probabilities: Vec<f64>,
    cumulative: Vec<f64>,
}

impl ResolvedPolicy {
    pub fn new(mut sets: Vec<Vec<NodeId>>, probabilities: Vec<f64>, n: usize) -> Result<Self> {
        if sets.is_empty() || sets.len() != probabilities.len() {
            return Err(Error::Config(
                "policy needs one probability per seed set".into(),
            ));
        }
        for s in sets.iter_mut() {
            s.sort_unstable();
            let len = s.len();
            SeedSet::new(s.clone(), len, n)?;
        }
        let mut seen = sets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != sets.len() {
            return Err(Error::Config("policy lists a seed set twice".into()));
        }
        if let Some(p) = probabilities.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::Config(format!(
                "policy assigns probability {p} to a seed set it can emit"
            )));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "policy probabilities sum to {total}, not 1"
            )));
        }
        let mut acc = 0.0;
        let cumulative = probabilities
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self {
            sets,
            probabilities,
            cumulative,
        })
    }

    fn draw(&self, rng: &mut SimRng) -> usize {
        let u: f64 = rng.random::<f64>() * self.cumulative[self.cumulative.len() - 1];
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.sets.len() - 1)
    }
}

fn random_pool(n: usize, k: usize, pool: usize, rng: &mut SimRng) -> Result<Vec<Vec<NodeId>>> {
    if k > n {
        return Err(Error::Config(format!("policy k = {k} exceeds n = {n}")));
    }
    let distinct = binomial(n, k);
    if (pool as u128) > distinct || pool == 0 {
        return Err(Error::Config(format!(
            "policy pool of {pool} sets is not available among {distinct} {k}-sets"
        )));
    }
    if (pool as u128) == distinct {
        return Ok(KSubsets::new(n, k).collect());
    }
    let mut sets: Vec<Vec<NodeId>> = Vec::with_capacity(pool);
    while sets.len() < pool {
        let mut s = index::sample(rng, n, k).into_vec();
        s.sort_unstable();
        if !sets.contains(&s) {
            sets.push(s);
        }
    }
    Ok(sets)
}

pub fn resolve_policy(
    policy: &PolicyConfig,
    g: &DirectedGraph,
    stream: &RngStream,
) -> Result<ResolvedPolicy> {
    let n = g.n();
    match policy {
        PolicyConfig::Fixed { set } => ResolvedPolicy::new(vec![set.clone()], vec![1.0], n),
        PolicyConfig::Uniform { sets } => {
            let m = sets.len();
            ResolvedPolicy::new(sets.clone(), vec![1.0 / m as f64; m], n)
        }
        PolicyConfig::Weighted {
            sets,
            probabilities,
        } => ResolvedPolicy::new(sets.clone(), probabilities.clone(), n),
        PolicyConfig::RandomPool { k, pool } => {
            let sets = random_pool(n, *k, *pool, &mut stream.named("pool").rng())?;
            let m = sets.len();
            ResolvedPolicy::new(sets, vec![1.0 / m as f64; m], n)
        }
        PolicyConfig::DegreeBiased {
            k,
            pool,
            temperature,
        } => {
            if !(*temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Config("policy temperature must be positive".into()));
            }
            let sets = random_pool(n, *k, *pool, &mut stream.named("pool").rng())?;
            let scores: Vec<f64> = sets
                .iter()
                .map(|s| {
                    let deg: usize = s.iter().map(|&v| g.out_degree(v)).sum();
                    deg as f64 / s.len().max(1) as f64 / temperature
                })
                .collect();
            let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let total: f64 = w.iter().sum();
            let probs: Vec<f64> = w.iter().map(|x| x / total).collect();
            if probs.iter().any(|&p| p <= 0.0) {
                return Err(Error::Config(
                    "temperature too low: a pooled seed set has zero probability".into(),
                ));
            }
            ResolvedPolicy::new(sets, probs, n)
        }
    }
}

/// Counts of outcomes clipped to `[-1, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipStats {
    pub clipped: usize,
    pub total: usize,
}

impl ClipStats {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.clipped as f64 / self.total as f64
        }
    }
}

/// Replicated experiments: draw a seed set, run one diffusion, record
/// exposures and noisy clipped outcomes.
pub fn gen_logged_data(inst: &Instance, cfg: &SynthConfig) -> Result<(LoggedDataset, ClipStats)> {
    let stream = RngStream::new(cfg.master_seed).named("data");
    logged_data_from_stream(inst, &cfg.policy, &cfg.data, &stream)
}

pub fn logged_data_from_stream(
    inst: &Instance,
    policy: &PolicyConfig,
    data: &DataConfig,
    stream: &RngStream,
) -> Result<(LoggedDataset, ClipStats)> {
    let policy = resolve_policy(policy, &inst.graph, stream)?;
    let noise = Normal::new(0.0, data.noise_sigma)
        .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
    let n = inst.graph.n();
    let results: Vec<(Replication, usize)> = (0..data.replications)
        .into_par_iter()
        .map(|l| {
            let mut rng = stream.named("replication").child(l as u64).rng();
            let which = policy.draw(&mut rng);
            let set = &policy.sets[which];
            let seeds = SeedSet::exact(set.clone(), n)?;
            let live = sample_live_edges(&inst.graph, &mut rng);
            let z = crate::diffusion::steady_state(&seeds, &inst.graph, &live)?.z_inf;
            let counts = exposure_counts(&z, &inst.spec)?;
            let mut clipped = 0;
            let rows = (0..n)
                .map(|i| {
                    let seeded = seeds.contains(i);
                    let (kp, kn) = counts[i];
                    let mut y = inst.model.node(i).outcome(seeded, kp, kn);
                    if data.noise_sigma > 0.0 {
                        y += noise.sample(&mut rng);
                    }
                    if y.abs() > 1.0 {
                        clipped += 1;
                        y = y.clamp(-1.0, 1.0);
                    }
                    NodeRow {
                        i,
                        z: seeded as u8,
                        kp,
                        kn,
                        y,
                    }
                })
                .collect();
            Ok((
                Replication {
                    seed: set.clone(),
                    context: 0,
                    propensity: Some(policy.probabilities[which]),
                    rows,
                },
                clipped,
            ))
        })
        .collect::<Result<_>>()?;
    let clipped = results.iter().map(|r| r.1).sum();
    let stats = ClipStats {
        clipped,
        total: n * data.replications,
    };
    if stats.fraction() > 0.05 {
        log::warn!(
            "{:.1}% of outcomes were clipped to [-1, 1]",
            100.0 * stats.fraction()
        );
    }
    Ok((
        LoggedDataset {
            replications: results.into_iter().map(|r| r.0).collect(),
        },
        stats,
    ))
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Sigma,
    EpsilonScale,
    K,
    N,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma" => Ok(SweepAxis::Sigma),
            "epsilon_scale" | "epsilon" => Ok(SweepAxis::EpsilonScale),
            "K" | "k" => Ok(SweepAxis::K),
            "N" | "n" => Ok(SweepAxis::N),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Sigma => "sigma",
            SweepAxis::EpsilonScale => "epsilon_scale",
            SweepAxis::K => "K",
            SweepAxis::N => "N",
        }
    }

    pub fn apply(self, base: &SynthConfig, value: f64) -> Result<SynthConfig> {
        let mut cfg = base.clone();
        let as_count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!(
                    "axis value {v} must be a nonnegative integer"
                )))
            }
        };
        match self {
            SweepAxis::Sigma => cfg.data.noise_sigma = value,
            SweepAxis::EpsilonScale => cfg.graph.epsilon_scale = value,
            SweepAxis::K => cfg.pipeline.k = as_count(value)?,
            SweepAxis::N => cfg.data.replications = as_count(value)?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of an experiment matrix: one method in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub repetition: usize,
    pub method: String,
    pub k: usize,
    pub seeds: String,
    /// Welfare of the selected set under the true model.
    pub welfare: f64,
    pub welfare_exact: bool,
    pub oracle: Option<f64>,
    pub oracle_gap: Option<f64>,
    pub clip_fraction: f64,
    pub cell_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ms: Option<f64>,
}

impl SweepRow {
    pub const CSV_HEADER: [&'static str; 13] = [
        "axis",
        "value",
        "repetition",
        "method",
        "K",
        "seeds",
        "welfare",
        "welfare_exact",
        "oracle",
        "oracle_gap",
        "clip_fraction",
        "cell_seed",
        "ms",
    ];

    pub fn csv_record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.axis.clone(),
            self.value.to_string(),
            self.repetition.to_string(),
            self.method.clone(),
            self.k.to_string(),
            self.seeds.clone(),
            self.welfare.to_string(),
            self.welfare_exact.to_string(),
            opt(self.oracle),
            opt(self.oracle_gap),
            self.clip_fraction.to_string(),
            self.cell_seed.to_string(),
            opt(self.ms),
        ]
    }
}

/// Welfare evaluator under the true model: exact when the live-edge law is
/// enumerable, otherwise a Monte-Carlo average over one fixed bank, so that
/// every method is scored on the same draws.
pub struct WelfareEvaluator<'a> {
    inst: &'a Instance,
    bank: Option<LiveEdgeBank>,
}

impl<'a> WelfareEvaluator<'a> {
    pub fn new(inst: &'a Instance, eval_r: usize, stream: &RngStream) -> Result<Self> {
        let uncertain = inst
            .graph
            .edges()
            .iter()
            .filter(|e| e.p > 0.0 && e.p < 1.0)
            .count();
        let bank = if uncertain <= EXACT_EDGE_LIMIT && inst.graph.n() <= 64 {
            None
        } else {
            Some(LiveEdgeBank::draw(&inst.graph, eval_r, stream)?)
        };
        Ok(Self { inst, bank })
    }

    pub fn is_exact(&self) -> bool {
        self.bank.is_none()
    }

    pub fn welfare(&self, set: &[NodeId]) -> Result<f64> {
        let n = self.inst.graph.n();
        let seeds = SeedSet::exact(set.to_vec(), n)?;
        match &self.bank {
            None => {
                let law = exact_law(&seeds, &self.inst.graph, &self.inst.spec)?;
                welfare_under_law(&law, &self.inst.spec, &self.inst.model)
            }
            Some(bank) => {
                let mask = seeds.mask(n);
                let states = bank.steady_states(set, &self.inst.graph);
                let mut total = 0.0;
                for z in &states {
                    let counts = exposure_counts(z, &self.inst.spec)?;
                    total += self.inst.model.welfare_at(&mask, &counts);
                }
                Ok(total / states.len() as f64)
            }
        }
    }
}

fn cell_seed(master: u64, axis: SweepAxis, value: f64, rep: usize) -> u64 {
    RngStream::new(master)
        .named(axis.name())
        .child(value.to_bits())
        .child(rep as u64)
        .seed()
}

/// One sweep cell: generate data, fit, select with CIM and baselines, and
/// score every selection against the exhaustive oracle when feasible.
///
/// The ground-truth instance depends only on the master seed and the
/// repetition, so all values of the axis share it; data, fitting and
/// selection draw from the cell seed.
pub fn run_cell(
    cfg: &SynthConfig,
    axis: SweepAxis,
    value: f64,
    rep: usize,
) -> Result<Vec<SweepRow>> {
    let seed = cell_seed(cfg.master_seed, axis, value, rep);
    let cell = RngStream::new(seed);
    let inst_stream = RngStream::new(cfg.master_seed)
        .named("instance")
        .child(rep as u64);
    let inst = instance_from_stream(cfg, &inst_stream)?;
    let k = cfg.pipeline.k;
    if k == 0 || k > inst.graph.n() {
        return Err(Error::Config(format!(
            "pipeline.k = {k} must lie in 1..={}",
            inst.graph.n()
        )));
    }
    let (data, clip) = logged_data_from_stream(&inst, &cfg.policy, &cfg.data, &cell.named("data"))?;
    let opts = FitOptions {
        lambda: cfg.pipeline.lambda,
        ..FitOptions::default()
    };
    let fitted = fit_shape_constrained(&data, inst.model.strata(), &opts)?.model;
    // Fitted grids cover only observed exposures; flat extension handles the rest.
    let eval = WelfareEvaluator::new(&inst, cfg.pipeline.eval_r, &inst_stream.named("evaluation"))?;

    let mut selections = Vec::new();
    let cim = greedy_cim(
        &inst.graph,
        &inst.spec,
        &fitted,
        &GreedyOptions {
            k,
            r: cfg.pipeline.r,
            lazy: cfg.pipeline.lazy,
            common_random_numbers: true,
        },
        &cell.named("select"),
    )?;
    selections.push(cim);
    let mut baselines = vec![Baseline::Degree, Baseline::Random];
    if cfg.pipeline.greedy_reach {
        baselines.push(Baseline::GreedyReach);
    }
    for b in baselines {
        selections.push(baseline_select(
            b,
            &inst.graph,
            k,
            cfg.pipeline.r,
            &cell.named("baseline"),
        )?);
    }

    let oracle = if binomial(inst.graph.n(), k) <= cfg.pipeline.oracle_limit {
        let sets: Vec<Vec<NodeId>> = KSubsets::new(inst.graph.n(), k).collect();
        let values = sets
            .par_iter()
            .map(|s| eval.welfare(s))
            .collect::<Result<Vec<f64>>>()?;
        Some(values.into_iter().fold(f64::NEG_INFINITY, f64::max))
    } else {
        None
    };

    let mut cache: HashMap<Vec<NodeId>, f64> = HashMap::new();
    let mut rows = Vec::new();
    for sel in selections {
        let set = sel.seeds.members().to_vec();
        let welfare = match cache.get(&set) {
            Some(&w) => w,
            None => {
                let w = eval.welfare(&set)?;
                cache.insert(set.clone(), w);
                w
            }
        };
        rows.push(SweepRow {
            axis: axis.name().into(),
            value,
            repetition: rep,
            method: sel.method.clone(),
            k,
            seeds: set
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            welfare,
            welfare_exact: eval.is_exact(),
            oracle,
            oracle_gap: oracle.map(|o| o - welfare),
            clip_fraction: clip.fraction(),
            cell_seed: seed,
            ms: None,
        });
    }
    Ok(rows)
}

/// Run the pipeline for every value and repetition. Cells run in parallel
/// and rows come back in (value, repetition, method) order.
pub fn sweep(axis: SweepAxis, values: &[f64], base: &SynthConfig) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    base.validate()?;
    let cells: Vec<(f64, usize)> = values
        .iter()
        .flat_map(|&v| (0..base.pipeline.repetitions).map(move |r| (v, r)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(v, r)| {
            let cfg = axis.apply(base, v)?;
            run_cell(&cfg, axis, v, r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// Mean of a column per (value, method), in first-seen order.
pub fn summarize(
    rows: &[SweepRow],
    column: impl Fn(&SweepRow) -> Option<f64>,
) -> Vec<(f64, String, f64)> {
    let mut keys: Vec<(f64, String)> = Vec::new();
    let mut acc: HashMap<(u64, String), (f64, usize)> = HashMap::new();
    for row in rows {
        let Some(x) = column(row) else { continue };
        let key = (row.value.to_bits(), row.method.clone());
        let e = acc.entry(key).or_insert_with(|| {
            keys.push((row.value, row.method.clone()));
            (0.0, 0)
        });
        e.0 += x;
        e.1 += 1;
    }
    keys.into_iter()
        .map(|(v, m)| {
            let (s, c) = acc[&(v.to_bits(), m.clone())];
            (v, m, s / c as f64)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Verification-scale instances

/// Shape of random enumeration-scale instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallInstanceShape {
    pub min_n: usize,
    pub max_n: usize,
    pub max_edges: usize,
    pub p_min: f64,
    pub p_max: f64,
    /// Largest grid size of the drawn curves.
    pub max_b: usize,
    pub profile: ResponseProfile,
    /// Probability that a node also gets negative sources.
    pub neg_prob: f64,
}

impl Default for SmallInstanceShape {
    fn default() -> Self {
        Self {
            min_n: 3,
            max_n: 8,
            max_edges: 14,
            p_min: 0.01,
            p_max: 0.3,
            max_b: 4,
            profile: ResponseProfile::Mixed,
            neg_prob: 0.3,
        }
    }
}

/// Random feasible curve on `0..=b` with `f(b) <= scale`: nonnegative,
/// nonincreasing increments.
pub fn random_curve(rng: &mut SimRng, b: usize, scale: f64, linear: bool) -> ResponseCurve {
    if b == 0 {
        return ResponseCurve::zero(0);
    }
    let first = scale * rng.random::<f64>() / b as f64;
    let mut inc = Vec::with_capacity(b);
    let mut cur = first;
    for _ in 0..b {
        inc.push(cur);
        if !linear {
            cur *= rng.random::<f64>();
        }
    }
    ResponseCurve::from_increments(&inc).expect("feasible by construction")
}

/// A random enumeration-scale instance with per-node strata.
///
/// Source sets are random subsets of the other nodes, so they include
/// non-neighbours as well as neighbours. Positive and negative sources
/// are disjoint.
pub fn random_small_instance(rng: &mut SimRng, shape: &SmallInstanceShape) -> Result<Instance> {
    let n = rng.random_range(shape.min_n..=shape.max_n);
    let possible = n * (n - 1);
    let m = rng.random_range(1..=shape.max_edges.min(possible).max(1));
    let picks = index::sample(rng, possible, m).into_vec();
    let mut edges: Vec<Edge> = picks
        .into_iter()
        .map(|code| {
            let src = code / (n - 1);
            let mut dst = code % (n - 1);
            if dst >= src {
                dst += 1;
            }
            Edge { src, dst, p: 0.0 }
        })
        .collect();
    edges.sort_by_key(|e| (e.src, e.dst));
    for e in edges.iter_mut() {
        e.p = if shape.p_max > shape.p_min {
            rng.random_range(shape.p_min..=shape.p_max)
        } else {
            shape.p_min
        };
    }
    let graph = DirectedGraph::new(n, edges)?;

    let mut pos = vec![Vec::new(); n];
    let mut neg = vec![Vec::new(); n];
    for i in 0..n {
        let others: Vec<NodeId> = (0..n).filter(|&j| j != i).collect();
        let sp = rng.random_range(0..=shape.max_b.min(others.len()));
        let chosen = index::sample(rng, others.len(), sp).into_vec();
        pos[i] = chosen.into_iter().map(|c| others[c]).collect();
        let rest: Vec<NodeId> = others
            .iter()
            .copied()
            .filter(|j| !pos[i].contains(j))
            .collect();
        if shape.profile == ResponseProfile::Mixed
            && !rest.is_empty()
            && rng.random::<f64>() < shape.neg_prob
        {
            let sn = rng.random_range(1..=shape.max_b.min(rest.len()));
            let chosen = index::sample(rng, rest.len(), sn).into_vec();
            neg[i] = chosen.into_iter().map(|c| rest[c]).collect();
        }
    }
    let spec = ExposureSpec::new(n, pos, neg)?;
    let linear = shape.profile == ResponseProfile::Linear;
    let responses = (0..n)
        .map(|i| StratumResponse {
            alpha: 0.2 * rng.random::<f64>(),
            f_pos: random_curve(rng, spec.pos(i).len(), 0.7, linear),
            f_neg: random_curve(rng, spec.neg(i).len(), 0.3, linear),
        })
        .collect();
    let model = ResponseModel::new((0..n).collect(), responses)?;
    Ok(Instance { graph, spec, model })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> SynthConfig {
        SynthConfig::from_toml(
            r#"
            master_seed = 7

            [graph]
            kind = "erdos_renyi"
            p = 0.2
            n = 12
            p_min = 0.05
            p_max = 0.2

            [response]
            profile = "concave"
            kappa = 0.05
            strata = 2

            [data]
            noise_sigma = 0.0
            replications = 30

            [policy]
            kind = "uniform"
            sets = [[0], [1, 2]]
            "#,
        )
        .unwrap()
    }

    #[test]
    fn path_and_star_topologies() {
        let mut rng = RngStream::new(1).rng();
        let cfg = GraphConfig {
            family: GraphFamily::Path,
            n: 3,
            p_min: 0.1,
            p_max: 0.1,
            epsilon_scale: 1.0,
        };
        assert_eq!(gen_topology(&cfg, &mut rng).unwrap(), vec![(0, 1), (1, 2)]);
        let star = GraphConfig {
            family: GraphFamily::Star,
            n: 4,
            ..cfg
        };
        assert_eq!(
            gen_topology(&star, &mut rng).unwrap(),
            vec![(0, 1), (0, 2), (0, 3)]
        );
    }

    #[test]
    fn epsilon_scale_is_multiplicative() {
        let mut cfg = base_config();
        let g1 = gen_instance(&cfg).unwrap().graph;
        cfg.graph.epsilon_scale = 0.25;
        let g2 = gen_instance(&cfg).unwrap().graph;
        let twice = g1.scaled(0.5).unwrap().scaled(0.5).unwrap();
        assert_eq!(g2.edge_count(), g1.edge_count());
        for (a, b) in twice.edges().iter().zip(g2.edges()) {
            assert!((a.p - b.p).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_profile_has_zero_curvature() {
        let mut cfg = base_config();
        cfg.response.profile = ResponseProfile::Linear;
        let model = gen_instance(&cfg).unwrap().model;
        for r in model.responses() {
            assert!(r.f_pos.curvature() < 1e-12);
        }
    }

    #[test]
    fn saturating_curve_hits_target_curvature() {
        let f = saturating_curve(0.6, 0.05, 5).unwrap();
        assert!((f.curvature() - 0.05).abs() < 1e-12);
        assert!(f.values()[5] < 0.6);
    }

    #[test]
    fn noiseless_data_reproduces_structural_model() {
        let cfg = base_config();
        let inst = gen_instance(&cfg).unwrap();
        let (data, clip) = gen_logged_data(&inst, &cfg).unwrap();
        assert_eq!(clip.clipped, 0);
        for rep in &data.replications {
            assert_eq!(rep.propensity, Some(0.5));
            for row in &rep.rows {
                let y = inst.model.node(row.i).outcome(row.z == 1, row.kp, row.kn);
                assert_eq!(row.y, y);
            }
        }
        let (again, _) = gen_logged_data(&inst, &cfg).unwrap();
        assert_eq!(data.to_jsonl(), again.to_jsonl());
    }

    #[test]
    fn policy_errors() {
        let g = gen_instance(&base_config()).unwrap().graph;
        let s = RngStream::new(0);
        let zero = PolicyConfig::Weighted {
            sets: vec![vec![0], vec![1]],
            probabilities: vec![1.0, 0.0],
        };
        assert!(resolve_policy(&zero, &g, &s).is_err());
        let dup = PolicyConfig::Uniform {
            sets: vec![vec![0, 1], vec![1, 0]],
        };
        assert!(resolve_policy(&dup, &g, &s).is_err());
        let biased = PolicyConfig::DegreeBiased {
            k: 2,
            pool: 5,
            temperature: 1.0,
        };
        let p = resolve_policy(&biased, &g, &s).unwrap();
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_field_is_named() {
        let err = SynthConfig::from_toml("master_seed = 1").unwrap_err();
        assert!(err.to_string().contains("graph"), "{err}");
    }

    #[test]
    fn small_instances_are_valid() {
        let mut rng = RngStream::new(3).rng();
        for _ in 0..50 {
            let inst = random_small_instance(&mut rng, &SmallInstanceShape::default()).unwrap();
            assert!(inst.graph.n() <= 8 && inst.graph.edge_count() <= 14);
            for r in inst.model.responses() {
                assert!(crate::response::check_shape(r.f_pos.values()).is_valid());
            }
        }
    }
}
