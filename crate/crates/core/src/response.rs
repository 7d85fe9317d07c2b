//! Exposure-response curves and their shape-constrained estimation.
//!
//! A response curve is a sequence `f(0..=B)` with `f(0) = 0`, nonnegative
//! increments, and nonincreasing increments. Between integers it is read
//! through its piecewise-linear interpolation; beyond `B` it is flat.
//!
//! Fitting reduces each curve block to a weighted projection of bin means
//! onto the cone of such sequences ([`project_concave`]); the joint model
//! `(alpha, f+, f-)` of each stratum is fit by block-coordinate descent.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ExposureSpec, NodeId, SeedSet, Sign};

/// Tolerance used when validating curve shape.
pub const SHAPE_TOL: f64 = 1e-9;

static CLAMPED_EVALS: AtomicU64 = AtomicU64::new(0);

/// Number of interpolation requests beyond a curve's grid so far.
pub fn clamp_warnings() -> u64 {
    CLAMPED_EVALS.load(Ordering::Relaxed)
}

/// One violated shape constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeViolation {
    /// `f(0) != 0`.
    NonzeroOrigin {
        value: f64,
    },
    /// `f(t+1) - f(t) < 0`.
    NegativeIncrement {
        t: usize,
        increment: f64,
    },
    /// `f(t+1) - f(t) > f(t) - f(t-1)`.
    SlopeIncrease {
        t: usize,
        from: f64,
        to: f64,
    },
    NonFinite {
        t: usize,
    },
}

impl std::fmt::Display for ShapeViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ShapeViolation::NonzeroOrigin { value } => write!(f, "f(0) = {value}, expected 0"),
            ShapeViolation::NegativeIncrement { t, increment } => {
                write!(f, "negative increment {increment} at t={t}")
            }
            ShapeViolation::SlopeIncrease { t, from, to } => {
                write!(f, "slope increases at t={t} ({from} -> {to})")
            }
            ShapeViolation::NonFinite { t } => write!(f, "non-finite value at t={t}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapeVerdict {
    pub violations: Vec<ShapeViolation>,
}

impl ShapeVerdict {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// List every violated shape constraint of a value sequence.
pub fn check_shape(values: &[f64]) -> ShapeVerdict {
    let mut violations = Vec::new();
    for (t, v) in values.iter().enumerate() {
        if !v.is_finite() {
            violations.push(ShapeViolation::NonFinite { t });
        }
    }
    if !violations.is_empty() {
        return ShapeVerdict { violations };
    }
    if let Some(&f0) = values.first() {
        if f0.abs() > SHAPE_TOL {
            violations.push(ShapeViolation::NonzeroOrigin { value: f0 });
        }
    }
    let inc: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    for (t, &d) in inc.iter().enumerate() {
        if d < -SHAPE_TOL {
            violations.push(ShapeViolation::NegativeIncrement { t, increment: d });
        }
        // A rise after a negative increment is already reported as such.
        if t > 0 && inc[t - 1] >= -SHAPE_TOL && d - inc[t - 1] > SHAPE_TOL {
            violations.push(ShapeViolation::SlopeIncrease {
                t,
                from: inc[t - 1],
                to: d,
            });
        }
    }
    ShapeVerdict { violations }
}

/// A nondecreasing, discretely concave response on `0..=B` with `f(0) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ResponseCurve {
    values: Vec<f64>,
}

impl TryFrom<Vec<f64>> for ResponseCurve {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ResponseCurve> for Vec<f64> {
    fn from(c: ResponseCurve) -> Self {
        c.values
    }
}

impl ResponseCurve {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::ShapeViolation("empty curve".into()));
        }
        let verdict = check_shape(&values);
        if let Some(first) = verdict.violations.first() {
            return Err(Error::ShapeViolation(first.to_string()));
        }
        Ok(Self { values })
    }

    /// Skip validation. Only for fault-injection fixtures.
    pub fn new_unchecked(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// The zero curve on `0..=b`.
    pub fn zero(b: usize) -> Self {
        Self {
            values: vec![0.0; b + 1],
        }
    }

    /// `f(t) = slope * t` on `0..=b`.
    pub fn linear(slope: f64, b: usize) -> Result<Self> {
        Self::new((0..=b).map(|t| slope * t as f64).collect())
    }

    /// Cumulative sums of the given increments.
    pub fn from_increments(increments: &[f64]) -> Result<Self> {
        let mut values = Vec::with_capacity(increments.len() + 1);
        values.push(0.0);
        let mut acc = 0.0;
        for d in increments {
            acc += d;
            values.push(acc);
        }
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Largest grid point `B`.
    pub fn b(&self) -> usize {
        self.values.len() - 1
    }

    /// `f(t)`, flat beyond `B`.
    pub fn at(&self, t: usize) -> f64 {
        self.values[t.min(self.b())]
    }

    /// `Δf(t) = f(t+1) - f(t)`, zero beyond the grid.
    pub fn increment(&self, t: usize) -> f64 {
        if t < self.b() {
            self.values[t + 1] - self.values[t]
        } else {
            0.0
        }
    }

    /// Lipschitz constant of the interpolation, `Δf(0)` for concave curves.
    pub fn lipschitz(&self) -> f64 {
        (0..self.b())
            .map(|t| self.increment(t).abs())
            .fold(0.0, f64::max)
    }

    /// Piecewise-linear interpolation at `x >= 0`; clamps to `f(B)` above
    /// the grid and counts the clamp in [`clamp_warnings`].
    pub fn interp(&self, x: f64) -> Result<f64> {
        if x.is_nan() || x < 0.0 {
            return Err(Error::Precondition(format!(
                "interpolation point must be nonnegative, got {x}"
            )));
        }
        let b = self.b() as f64;
        if x >= b {
            if x > b + SHAPE_TOL {
                CLAMPED_EVALS.fetch_add(1, Ordering::Relaxed);
                log::debug!("interpolation at {x} beyond grid end {b}; clamped");
            }
            return Ok(self.values[self.b()]);
        }
        let m = x.floor();
        let theta = x - m;
        let m = m as usize;
        Ok((1.0 - theta) * self.values[m] + theta * self.values[m + 1])
    }

    /// Largest drop between consecutive increments; 0 when `B <= 1`.
    pub fn curvature(&self) -> f64 {
        (1..self.b())
            .map(|t| self.increment(t - 1) - self.increment(t))
            .fold(0.0, f64::max)
    }
}

/// Direct effect and response curves shared by one stratum of nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumResponse {
    pub alpha: f64,
    pub f_pos: ResponseCurve,
    pub f_neg: ResponseCurve,
}

impl StratumResponse {
    pub fn curve(&self, sign: Sign) -> &ResponseCurve {
        match sign {
            Sign::Pos => &self.f_pos,
            Sign::Neg => &self.f_neg,
        }
    }

    /// `Y = alpha * seeded + f+(kp) - f-(kn)` at integer exposures.
    pub fn outcome(&self, seeded: bool, kp: usize, kn: usize) -> f64 {
        let direct = if seeded { self.alpha } else { 0.0 };
        direct + self.f_pos.at(kp) - self.f_neg.at(kn)
    }
}

/// Node-to-stratum assignment with one [`StratumResponse`] per stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseModel {
    strata: Vec<usize>,
    responses: Vec<StratumResponse>,
}

#[derive(Serialize, Deserialize)]
struct ResponseModelFile {
    format_version: u32,
    strata: Vec<usize>,
    responses: Vec<StratumResponse>,
}

impl ResponseModel {
    pub fn new(strata: Vec<usize>, responses: Vec<StratumResponse>) -> Result<Self> {
        if let Some(&bad) = strata.iter().find(|&&r| r >= responses.len()) {
            return Err(Error::InvalidData(format!(
                "stratum id {bad} has no response ({} defined)",
                responses.len()
            )));
        }
        Ok(Self { strata, responses })
    }

    /// Every node shares one response.
    pub fn uniform(n: usize, response: StratumResponse) -> Self {
        Self {
            strata: vec![0; n],
            responses: vec![response],
        }
    }

    pub fn n(&self) -> usize {
        self.strata.len()
    }

    pub fn strata(&self) -> &[usize] {
        &self.strata
    }

    pub fn responses(&self) -> &[StratumResponse] {
        &self.responses
    }

    pub fn node(&self, i: NodeId) -> &StratumResponse {
        &self.responses[self.strata[i]]
    }

    /// Sum over nodes of their outcomes under integer exposure counts.
    pub fn welfare_at(&self, seeds: &[bool], counts: &[(usize, usize)]) -> f64 {
        (0..self.n())
            .map(|i| self.node(i).outcome(seeds[i], counts[i].0, counts[i].1))
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ResponseModelFile {
            format_version: crate::FORMAT_VERSION,
            strata: self.strata.clone(),
            responses: self.responses.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        crate::io::check_format_version(text)?;
        let file: ResponseModelFile = serde_json::from_str(text)?;
        Self::new(file.strata, file.responses)
    }
}

// ---------------------------------------------------------------------------
// Logged data

/// One node's record within a replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRow {
    pub i: NodeId,
    /// Seed indicator, 0 or 1.
    pub z: u8,
    pub kp: usize,
    pub kn: usize,
    pub y: f64,
}

/// One replicated diffusion experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub seed: Vec<NodeId>,
    pub context: i64,
    /// Probability the logging policy assigned to `seed` in this context.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propensity: Option<f64>,
    pub rows: Vec<NodeRow>,
}

impl Replication {
    pub fn welfare(&self) -> f64 {
        self.rows.iter().map(|r| r.y).sum()
    }

    pub fn matches(&self, target: &[NodeId]) -> bool {
        let mut seed = self.seed.clone();
        seed.sort_unstable();
        seed == target
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoggedDataset {
    pub replications: Vec<Replication>,
}

impl LoggedDataset {
    pub fn len(&self) -> usize {
        self.replications.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replications.is_empty()
    }

    /// Check the record invariants; `n` and `spec` add range checks.
    pub fn validate(&self, n: Option<usize>, spec: Option<&ExposureSpec>) -> Result<()> {
        for (l, rep) in self.replications.iter().enumerate() {
            if let Some(p) = rep.propensity {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::InvalidPropensity {
                        replication: l,
                        propensity: p,
                    });
                }
            }
            let mut seed = rep.seed.clone();
            seed.sort_unstable();
            for row in &rep.rows {
                if !row.y.is_finite() {
                    return Err(Error::NonFinite("outcome"));
                }
                if row.y.abs() > 1.0 {
                    return Err(Error::InvalidData(format!(
                        "replication {l}, node {}: outcome {} outside [-1, 1]",
                        row.i, row.y
                    )));
                }
                if row.z > 1 {
                    return Err(Error::InvalidData(format!(
                        "replication {l}, node {}: seed indicator must be 0 or 1",
                        row.i
                    )));
                }
                if (row.z == 1) != seed.binary_search(&row.i).is_ok() {
                    return Err(Error::InvalidData(format!(
                        "replication {l}, node {}: seed indicator disagrees with seed set",
                        row.i
                    )));
                }
                if let Some(n) = n {
                    if row.i >= n {
                        return Err(Error::NodeOutOfRange { node: row.i, n });
                    }
                }
                if let Some(spec) = spec {
                    if row.i >= spec.n() {
                        return Err(Error::NodeOutOfRange {
                            node: row.i,
                            n: spec.n(),
                        });
                    }
                    if row.kp > spec.pos(row.i).len() || row.kn > spec.neg(row.i).len() {
                        return Err(Error::InvalidData(format!(
                            "replication {l}, node {}: exposure exceeds source-set size",
                            row.i
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// JSON Lines: a version header, then one replication per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = format!("{{\"format_version\":{}}}\n", crate::FORMAT_VERSION);
        for rep in &self.replications {
            out.push_str(&serde_json::to_string(rep).expect("replication serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut replications = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| Error::InvalidData(format!("line {}: {e}", idx + 1)))?;
            if value.get("rows").is_none() && value.get("format_version").is_some() {
                crate::io::check_format_version(line)?;
                continue;
            }
            let rep: Replication = serde_json::from_value(value)
                .map_err(|e| Error::InvalidData(format!("line {}: {e}", idx + 1)))?;
            replications.push(rep);
        }
        let data = Self { replications };
        data.validate(None, None)?;
        Ok(data)
    }
}

/// Seed-set inverse propensity weights `1{Z = S} / pi(S | X)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpsWeights {
    pub weights: Vec<f64>,
    pub matched: usize,
}

impl IpsWeights {
    /// `(sum w)^2 / sum w^2`; zero when nothing matched.
    pub fn effective_sample_size(&self) -> f64 {
        let s: f64 = self.weights.iter().sum();
        let s2: f64 = self.weights.iter().map(|w| w * w).sum();
        if s2 > 0.0 {
            s * s / s2
        } else {
            0.0
        }
    }
}

pub fn ips_weights(data: &LoggedDataset, target: &SeedSet) -> Result<IpsWeights> {
    let mut matched = 0;
    let weights = data
        .replications
        .iter()
        .enumerate()
        .map(|(l, rep)| {
            if !rep.matches(target.members()) {
                return Ok(0.0);
            }
            matched += 1;
            match rep.propensity {
                Some(p) if p > 0.0 && p <= 1.0 => Ok(1.0 / p),
                Some(p) => Err(Error::InvalidPropensity {
                    replication: l,
                    propensity: p,
                }),
                None => Err(Error::InvalidData(format!(
                    "replication {l} matches the target but has no propensity"
                ))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if matched == 0 {
        log::warn!("no replication logged the target seed set; IPS weights are all zero");
    }
    Ok(IpsWeights { weights, matched })
}

// ---------------------------------------------------------------------------
// Cone projection

/// Minimize `0.5 x'Hx + q'x` over `x >= 0` by a primal active-set method
/// (Lawson-Hanson). `H` must be positive definite.
fn nonneg_qp(h: &DMatrix<f64>, q: &DVector<f64>) -> Result<DVector<f64>> {
    let m = q.len();
    let mut x = DVector::zeros(m);
    if m == 0 {
        return Ok(x);
    }
    let scale = q
        .iter()
        .map(|v| v.abs())
        .chain(h.diagonal().iter().map(|v| v.abs()))
        .fold(f64::MIN_POSITIVE, f64::max);
    let tol = 1e-13 * scale;
    let mut passive = vec![false; m];
    let mut blocked = vec![false; m];

    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..m).filter(|&k| passive[k]).collect();
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| h[(idx[a], idx[b])]);
        let rhs = DVector::from_fn(idx.len(), |a, _| -q[idx[a]]);
        let sol = match sub.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => sub
                .lu()
                .solve(&rhs)
                .unwrap_or_else(|| DVector::zeros(idx.len())),
        };
        let mut full = DVector::zeros(m);
        for (a, &k) in idx.iter().enumerate() {
            full[k] = sol[a];
        }
        full
    };

    let max_outer = 50 * (m + 1) * (m + 1);
    for _ in 0..max_outer {
        let grad = h * &x + q;
        let entering = (0..m)
            .filter(|&k| !passive[k] && !blocked[k] && grad[k] < -tol)
            .min_by(|&a, &b| grad[a].total_cmp(&grad[b]));
        let Some(k) = entering else {
            return Ok(x);
        };
        passive[k] = true;
        let mut first = true;
        loop {
            let s = solve_passive(&passive);
            if first && s[k] <= 0.0 {
                // Numerically degenerate entry; retry without it.
                passive[k] = false;
                blocked[k] = true;
                break;
            }
            first = false;
            let infeasible: Vec<usize> = (0..m).filter(|&j| passive[j] && s[j] <= 0.0).collect();
            if infeasible.is_empty() {
                x = s;
                blocked.iter_mut().for_each(|b| *b = false);
                break;
            }
            let step = infeasible
                .iter()
                .map(|&j| x[j] / (x[j] - s[j]))
                .fold(f64::INFINITY, f64::min);
            x += (s - &x) * step;
            for j in 0..m {
                if passive[j] && x[j] <= 1e-15 * scale.max(1.0) {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
            blocked.iter_mut().for_each(|b| *b = false);
        }
    }
    Err(Error::Solver(
        "active-set projection did not terminate".into(),
    ))
}

/// Weighted projection of bin means onto the cone of nondecreasing,
/// discretely concave sequences with `f(0) = 0`, plus an optional linear
/// penalty `penalty * f(B)` (the total variation of a monotone curve).
///
/// Only bins with positive weight constrain the fit. Between observed bins
/// the result is linear; above the last observed bin it is flat.
pub fn project_concave(targets: &[f64], weights: &[f64], penalty: f64) -> Result<Vec<f64>> {
    if targets.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: targets.len(),
            got: weights.len(),
        });
    }
    if targets.is_empty() {
        return Err(Error::Precondition(
            "projection needs at least one bin".into(),
        ));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidData(
            "bin weights must be finite and nonnegative".into(),
        ));
    }
    if targets
        .iter()
        .zip(weights)
        .any(|(t, w)| *w > 0.0 && !t.is_finite())
    {
        return Err(Error::NonFinite("bin mean"));
    }
    if !(penalty.is_finite() && penalty >= 0.0) {
        return Err(Error::Precondition("penalty must be nonnegative".into()));
    }
    let b = targets.len() - 1;
    // Observed grid points above the pinned origin.
    let anchors: Vec<usize> = (1..=b).filter(|&t| weights[t] > 0.0).collect();
    if anchors.is_empty() {
        return Ok(vec![0.0; b + 1]);
    }
    let m = anchors.len();
    let xs: Vec<f64> = anchors.iter().map(|&t| t as f64).collect();
    // theta(x_j) = sum_k g_k * min(x_j, x_k) with g >= 0 encodes
    // nonnegative, nonincreasing secant slopes between anchors.
    let basis = |j: usize, k: usize| xs[j].min(xs[k]);
    let h = DMatrix::from_fn(m, m, |k, l| {
        (0..m)
            .map(|j| weights[anchors[j]] * basis(j, k) * basis(j, l))
            .sum()
    });
    let q = DVector::from_fn(m, |k, _| {
        -(0..m)
            .map(|j| weights[anchors[j]] * targets[anchors[j]] * basis(j, k))
            .sum::<f64>()
            + 0.5 * penalty * xs[k]
    });
    let g = nonneg_qp(&h, &q)?;
    let at_anchor: Vec<f64> = (0..m)
        .map(|j| (0..m).map(|k| g[k] * basis(j, k)).sum())
        .collect();

    let mut out = vec![0.0; b + 1];
    let (mut prev_x, mut prev_v) = (0usize, 0.0f64);
    for (j, &t) in anchors.iter().enumerate() {
        let v = at_anchor[j];
        for (u, slot) in out.iter_mut().enumerate().take(t + 1).skip(prev_x + 1) {
            let frac = (u - prev_x) as f64 / (t - prev_x) as f64;
            *slot = prev_v + frac * (v - prev_v);
        }
        prev_x = t;
        prev_v = v;
    }
    for slot in out.iter_mut().skip(prev_x + 1) {
        *slot = prev_v;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Shape-constrained fit

/// Observation weighting for the least-squares fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    /// Reweight replications by `1{Z = target} / pi`, optionally capped.
    Ips {
        target: Vec<NodeId>,
        #[serde(default)]
        cap: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Grid sizes; default to the largest observed exposure per stratum.
    pub b_pos: Option<usize>,
    pub b_neg: Option<usize>,
    /// Total-variation penalty weight.
    pub lambda: f64,
    pub weighting: Weighting,
    /// Relative objective change that ends the block-coordinate descent.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            b_pos: None,
            b_neg: None,
            lambda: 0.0,
            weighting: Weighting::Uniform,
            tol: 1e-9,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumFit {
    pub observations: usize,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    /// Effective sample size `(sum w)^2 / sum w^2` per exposure bin.
    pub n_eff_pos: Vec<f64>,
    pub n_eff_neg: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: ResponseModel,
    pub strata: Vec<StratumFit>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Cell {
    w: f64,
    wy: f64,
    w2: f64,
    /// Within-cell weighted sum of squares about the cell mean.
    within: f64,
    mean: f64,
}

type CellKey = (bool, usize, usize);

fn replication_weights(data: &LoggedDataset, weighting: &Weighting) -> Result<Vec<f64>> {
    match weighting {
        Weighting::Uniform => Ok(vec![1.0; data.len()]),
        Weighting::Ips { target, cap } => {
            let mut sorted = target.clone();
            sorted.sort_unstable();
            let k = sorted.len();
            let seeds = SeedSet::new(sorted, k, usize::MAX)?;
            let mut w = ips_weights(data, &seeds)?.weights;
            if let Some(cap) = cap {
                w.iter_mut().for_each(|x| *x = x.min(*cap));
            }
            Ok(w)
        }
    }
}

/// Fit `(alpha_r, f_r^+, f_r^-)` per stratum by weighted least squares
/// under the shape constraints.
///
/// `strata[i]` is the stratum of node `i`; ids must be dense `0..R`.
pub fn fit_shape_constrained(
    data: &LoggedDataset,
    strata: &[usize],
    opts: &FitOptions,
) -> Result<FitReport> {
    if !(opts.lambda.is_finite() && opts.lambda >= 0.0) {
        return Err(Error::Precondition(format!(
            "TV penalty must be nonnegative, got {}",
            opts.lambda
        )));
    }
    data.validate(Some(strata.len()), None)?;
    let rep_weights = replication_weights(data, &opts.weighting)?;
    let n_strata = strata.iter().copied().max().map_or(0, |m| m + 1);

    // Aggregate observations into (z, kp, kn) cells per stratum.
    let mut raw: Vec<BTreeMap<CellKey, (f64, f64, f64, f64)>> = vec![BTreeMap::new(); n_strata];
    let mut counts = vec![0usize; n_strata];
    let mut max_k = vec![(0usize, 0usize); n_strata];
    for (rep, &w) in data.replications.iter().zip(&rep_weights) {
        for row in &rep.rows {
            let r = strata[row.i];
            counts[r] += 1;
            max_k[r].0 = max_k[r].0.max(row.kp);
            max_k[r].1 = max_k[r].1.max(row.kn);
            if w == 0.0 {
                continue;
            }
            let e = raw[r].entry((row.z == 1, row.kp, row.kn)).or_default();
            e.0 += w;
            e.1 += w * row.y;
            e.2 += w * w;
            e.3 += w * row.y * row.y;
        }
    }
    if let Some(r) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyStratum(r));
    }
    if let Some(r) = raw.iter().position(|cells| cells.is_empty()) {
        return Err(Error::InvalidData(format!(
            "stratum {r} has no observation with positive weight"
        )));
    }

    let fits: Vec<(StratumResponse, StratumFit)> = (0..n_strata)
        .into_par_iter()
        .map(|r| {
            let b_pos = grid_size(opts.b_pos, max_k[r].0, r, "positive")?;
            let b_neg = grid_size(opts.b_neg, max_k[r].1, r, "negative")?;
            let cells: Vec<(CellKey, Cell)> = raw[r]
                .iter()
                .map(|(&key, &(w, wy, w2, wyy))| {
                    let mean = wy / w;
                    let within = (wyy - wy * mean).max(0.0);
                    (
                        key,
                        Cell {
                            w,
                            wy,
                            w2,
                            within,
                            mean,
                        },
                    )
                })
                .collect();
            fit_stratum(&cells, counts[r], b_pos, b_neg, opts)
        })
        .collect::<Result<_>>()?;

    let (responses, reports): (Vec<_>, Vec<_>) = fits.into_iter().unzip();
    Ok(FitReport {
        model: ResponseModel::new(strata.to_vec(), responses)?,
        strata: reports,
    })
}

fn grid_size(requested: Option<usize>, observed: usize, r: usize, label: &str) -> Result<usize> {
    match requested {
        Some(b) if b < observed => Err(Error::InvalidData(format!(
            "stratum {r}: {label} exposure {observed} exceeds grid size {b}"
        ))),
        Some(b) => Ok(b),
        None => Ok(observed),
    }
}

fn fit_stratum(
    cells: &[(CellKey, Cell)],
    n_obs: usize,
    b_pos: usize,
    b_neg: usize,
    opts: &FitOptions,
) -> Result<(StratumResponse, StratumFit)> {
    let n_r = n_obs as f64;
    let penalty = opts.lambda * n_r;
    let mut warnings = Vec::new();

    let treated: f64 = cells.iter().filter(|(k, _)| k.0).map(|(_, c)| c.w).sum();
    let untreated: f64 = cells.iter().filter(|(k, _)| !k.0).map(|(_, c)| c.w).sum();
    if treated == 0.0 {
        warnings.push("no seeded observations; direct effect pinned to 0".to_string());
    } else if untreated == 0.0 {
        warnings.push(
            "every observation is seeded; direct effect is confounded with the curves".to_string(),
        );
    }

    let within: f64 = cells.iter().map(|(_, c)| c.within).sum();
    let mut alpha = 0.0;
    let mut f_pos = vec![0.0; b_pos + 1];
    let mut f_neg = vec![0.0; b_neg + 1];

    let objective = |alpha: f64, f_pos: &[f64], f_neg: &[f64]| -> f64 {
        let fitted: f64 = cells
            .iter()
            .map(|&((z, kp, kn), c)| {
                let pred = if z { alpha } else { 0.0 } + f_pos[kp] - f_neg[kn];
                c.w * (c.mean - pred).powi(2)
            })
            .sum();
        (within + fitted) / n_r + opts.lambda * (f_pos[b_pos] + f_neg[b_neg])
    };

    let mut prev = objective(alpha, &f_pos, &f_neg);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;

        if treated > 0.0 {
            let num: f64 = cells
                .iter()
                .filter(|(k, _)| k.0)
                .map(|&((_, kp, kn), c)| c.wy - c.w * (f_pos[kp] - f_neg[kn]))
                .sum();
            alpha = num / treated;
        }

        let mut bin_w = vec![0.0; b_pos + 1];
        let mut bin_s = vec![0.0; b_pos + 1];
        for &((z, kp, kn), c) in cells {
            let shift = if z { alpha } else { 0.0 } - f_neg[kn];
            bin_w[kp] += c.w;
            bin_s[kp] += c.wy - c.w * shift;
        }
        let means: Vec<f64> = bin_s
            .iter()
            .zip(&bin_w)
            .map(|(s, w)| if *w > 0.0 { s / w } else { 0.0 })
            .collect();
        f_pos = project_concave(&means, &bin_w, penalty)?;

        let mut bin_w = vec![0.0; b_neg + 1];
        let mut bin_s = vec![0.0; b_neg + 1];
        for &((z, kp, kn), c) in cells {
            let shift = if z { alpha } else { 0.0 } + f_pos[kp];
            bin_w[kn] += c.w;
            bin_s[kn] += c.w * shift - c.wy;
        }
        let means: Vec<f64> = bin_s
            .iter()
            .zip(&bin_w)
            .map(|(s, w)| if *w > 0.0 { s / w } else { 0.0 })
            .collect();
        f_neg = project_concave(&means, &bin_w, penalty)?;

        let cur = objective(alpha, &f_pos, &f_neg);
        if (prev - cur).abs() <= opts.tol * prev.abs() || (prev - cur).abs() < 1e-300 {
            prev = cur;
            converged = true;
            break;
        }
        prev = cur;
    }
    if !converged {
        warnings.push(format!(
            "block-coordinate descent stopped after {iterations} iterations"
        ));
    }
    // Callers surface these from the report; log only at debug to avoid duplicates.
    for w in &warnings {
        log::debug!("{w}");
    }

    let n_eff = |b: usize, key: fn(&CellKey) -> usize| -> Vec<f64> {
        let mut s = vec![0.0; b + 1];
        let mut s2 = vec![0.0; b + 1];
        for (k, c) in cells {
            s[key(k)] += c.w;
            s2[key(k)] += c.w2;
        }
        s.iter()
            .zip(&s2)
            .map(|(a, b)| if *b > 0.0 { a * a / b } else { 0.0 })
            .collect()
    };

    let response = StratumResponse {
        alpha,
        f_pos: ResponseCurve::new(f_pos)?,
        f_neg: ResponseCurve::new(f_neg)?,
    };
    let report = StratumFit {
        observations: n_obs,
        iterations,
        converged,
        objective: prev,
        n_eff_pos: n_eff(b_pos, |k| k.1),
        n_eff_neg: n_eff(b_neg, |k| k.2),
        warnings,
    };
    Ok((response, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(v: &[f64]) -> ResponseCurve {
        ResponseCurve::new(v.to_vec()).unwrap()
    }

    #[test]
    fn interpolation_examples() {
        let f = curve(&[0.0, 1.0, 1.5]);
        assert_eq!(f.interp(0.5).unwrap(), 0.5);
        assert_eq!(f.interp(2.0).unwrap(), 1.5);
        assert!((f.interp(1.25).unwrap() - 1.125).abs() < 1e-15);
        assert!(f.interp(-0.1).is_err());
        let before = clamp_warnings();
        assert_eq!(f.interp(7.0).unwrap(), 1.5);
        assert!(clamp_warnings() > before);
    }

    #[test]
    fn curvature_examples() {
        assert_eq!(curve(&[0.0, 2.0, 4.0, 6.0]).curvature(), 0.0);
        assert_eq!(curve(&[0.0, 2.0, 3.0, 3.5]).curvature(), 1.0);
        assert_eq!(curve(&[0.0, 1.0, 1.0]).curvature(), 1.0);
        assert_eq!(ResponseCurve::zero(0).curvature(), 0.0);
    }

    #[test]
    fn shape_verdicts() {
        assert!(check_shape(&[0.0, 1.0, 1.5]).is_valid());
        let convex = check_shape(&[0.0, 1.0, 3.0]);
        assert_eq!(
            convex.violations,
            vec![ShapeViolation::SlopeIncrease {
                t: 1,
                from: 1.0,
                to: 2.0
            }]
        );
        let decreasing = check_shape(&[0.0, -1.0, -1.0]);
        assert_eq!(
            decreasing.violations,
            vec![ShapeViolation::NegativeIncrement {
                t: 0,
                increment: -1.0
            }]
        );
        assert!(matches!(
            check_shape(&[0.5, 1.0]).violations[0],
            ShapeViolation::NonzeroOrigin { .. }
        ));
        assert!(ResponseCurve::new(vec![0.0, 1.0, 3.0]).is_err());
    }

    #[test]
    fn curve_json_is_validated() {
        let ok: ResponseCurve = serde_json::from_str("[0, 1, 1.5]").unwrap();
        assert_eq!(ok.b(), 2);
        assert!(serde_json::from_str::<ResponseCurve>("[0, 1, 3]").is_err());
    }

    #[test]
    fn projection_is_identity_on_feasible_means() {
        let out = project_concave(&[0.0, 1.0, 1.8], &[1.0, 1.0, 1.0], 0.0).unwrap();
        for (a, b) in out.iter().zip([0.0, 1.0, 1.8]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_of_convex_means() {
        // Brute-force: minimize (1 - a)^2 + (2.5 - b)^2 over a dense grid
        // of feasible (a, b) with 0 <= b - a <= a.
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=3000 {
            let a = i as f64 * 0.001;
            for j in 0..=3000 {
                let b = j as f64 * 0.001;
                if b - a < 0.0 || b - a > a {
                    continue;
                }
                let obj = (1.0 - a).powi(2) + (2.5 - b).powi(2);
                if obj < best.0 {
                    best = (obj, a, b);
                }
            }
        }
        let out = project_concave(&[0.0, 1.0, 2.5], &[1.0, 1.0, 1.0], 0.0).unwrap();
        assert!((out[1] - best.1).abs() < 2e-3 && (out[2] - best.2).abs() < 2e-3);
        assert!((out[1] - 1.2).abs() < 1e-12 && (out[2] - 2.4).abs() < 1e-12);
    }

    #[test]
    fn projection_fills_gaps_linearly_and_flat() {
        let out =
            project_concave(&[0.0, 0.0, 2.0, 0.0, 0.0], &[1.0, 0.0, 3.0, 0.0, 0.0], 0.0).unwrap();
        for (a, b) in out.iter().zip([0.0, 1.0, 2.0, 2.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(
            project_concave(&[0.0, 5.0], &[1.0, 0.0], 0.0).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn penalty_shrinks_the_curve() {
        let means = [0.0, 1.0, 1.5, 1.8];
        let w = [10.0; 4];
        let plain = project_concave(&means, &w, 0.0).unwrap();
        let shrunk = project_concave(&means, &w, 5.0).unwrap();
        assert!(shrunk[3] < plain[3]);
        assert!(check_shape(&shrunk).is_valid());
    }

    fn replication(
        seed: Vec<usize>,
        propensity: Option<f64>,
        rows: Vec<(usize, u8, usize, usize, f64)>,
    ) -> Replication {
        Replication {
            seed,
            context: 0,
            propensity,
            rows: rows
                .into_iter()
                .map(|(i, z, kp, kn, y)| NodeRow { i, z, kp, kn, y })
                .collect(),
        }
    }

    #[test]
    fn fit_reduces_to_bin_means() {
        // One node, never seeded, f- has a single bin.
        let means = [0.0, 1.0, 1.8];
        let reps = (0..3)
            .map(|t| replication(vec![], None, vec![(0, 0, t, 0, means[t] / 2.0)]))
            .collect();
        let data = LoggedDataset { replications: reps };
        let report = fit_shape_constrained(&data, &[0], &FitOptions::default()).unwrap();
        let resp = &report.model.responses()[0];
        assert_eq!(resp.alpha, 0.0);
        assert_eq!(resp.f_neg.values(), &[0.0]);
        for (a, b) in resp.f_pos.values().iter().zip([0.0, 0.5, 0.9]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(report.strata[0]
            .warnings
            .iter()
            .any(|w| w.contains("pinned")));
    }

    #[test]
    fn fit_recovers_noiseless_model() {
        let truth = StratumResponse {
            alpha: 0.2,
            f_pos: curve(&[0.0, 0.3, 0.5, 0.6]),
            f_neg: curve(&[0.0, 0.15, 0.2]),
        };
        let mut reps = Vec::new();
        for z in 0..2u8 {
            for kp in 0..=3 {
                for kn in 0..=2 {
                    let y = truth.outcome(z == 1, kp, kn);
                    let seed = if z == 1 { vec![0] } else { vec![] };
                    reps.push(replication(seed, Some(0.5), vec![(0, z, kp, kn, y)]));
                }
            }
        }
        let data = LoggedDataset { replications: reps };
        let fit = fit_shape_constrained(&data, &[0], &FitOptions::default()).unwrap();
        let got = &fit.model.responses()[0];
        assert!((got.alpha - truth.alpha).abs() < 1e-6);
        for (a, b) in got.f_pos.values().iter().zip(truth.f_pos.values()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        for (a, b) in got.f_neg.values().iter().zip(truth.f_neg.values()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn fit_errors() {
        let data = LoggedDataset {
            replications: vec![replication(vec![], None, vec![(0, 0, 1, 0, 0.3)])],
        };
        assert!(matches!(
            fit_shape_constrained(&data, &[0, 1], &FitOptions::default()),
            Err(Error::EmptyStratum(1))
        ));
        let opts = FitOptions {
            lambda: -1.0,
            ..FitOptions::default()
        };
        assert!(fit_shape_constrained(&data, &[0], &opts).is_err());
        let ips = FitOptions {
            weighting: Weighting::Ips {
                target: vec![],
                cap: None,
            },
            ..FitOptions::default()
        };
        // Matches the empty seed set but carries no propensity.
        assert!(fit_shape_constrained(&data, &[0], &ips).is_err());
        let narrow = FitOptions {
            b_pos: Some(0),
            ..FitOptions::default()
        };
        assert!(fit_shape_constrained(&data, &[0], &narrow).is_err());
    }

    #[test]
    fn ips_weight_examples() {
        let rep = |seed: Vec<usize>, p: f64| replication(seed, Some(p), vec![]);
        let on_policy = LoggedDataset {
            replications: vec![rep(vec![1], 1.0), rep(vec![1], 1.0)],
        };
        let s = SeedSet::exact(vec![1], 3).unwrap();
        assert_eq!(ips_weights(&on_policy, &s).unwrap().weights, vec![1.0, 1.0]);

        let uniform = LoggedDataset {
            replications: vec![rep(vec![0], 0.25), rep(vec![1], 0.25), rep(vec![2], 0.25)],
        };
        let w = ips_weights(&uniform, &s).unwrap();
        assert_eq!(w.weights, vec![0.0, 4.0, 0.0]);
        assert_eq!(w.matched, 1);

        let other = SeedSet::exact(vec![0, 2], 3).unwrap();
        let none = ips_weights(&uniform, &other).unwrap();
        assert!(none.weights.iter().all(|&x| x == 0.0));
        assert_eq!(none.effective_sample_size(), 0.0);
    }

    #[test]
    fn dataset_jsonl_round_trip_and_validation() {
        let data = LoggedDataset {
            replications: vec![replication(
                vec![0],
                Some(0.5),
                vec![(0, 1, 0, 0, 0.25), (1, 0, 1, 0, -0.5)],
            )],
        };
        let text = data.to_jsonl();
        assert_eq!(LoggedDataset::from_jsonl(&text).unwrap(), data);
        let line = r#"{"seed":[0],"context":3,"propensity":0.5,"rows":[{"i":0,"z":1,"kp":0,"kn":0,"y":0.1}]}"#;
        assert_eq!(
            LoggedDataset::from_jsonl(line).unwrap().replications[0].context,
            3
        );
        let bad_y = r#"{"seed":[],"context":0,"propensity":0.5,"rows":[{"i":0,"z":0,"kp":0,"kn":0,"y":1.5}]}"#;
        assert!(LoggedDataset::from_jsonl(bad_y).is_err());
        let bad_p = r#"{"seed":[],"context":0,"propensity":0.0,"rows":[]}"#;
        assert!(LoggedDataset::from_jsonl(bad_p).is_err());
        assert!(LoggedDataset::from_jsonl("{\"format_version\":9}\n").is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let model = ResponseModel::new(
            vec![0, 1, 0],
            vec![
                StratumResponse {
                    alpha: 0.1,
                    f_pos: curve(&[0.0, 0.5]),
                    f_neg: ResponseCurve::zero(0),
                },
                StratumResponse {
                    alpha: 0.0,
                    f_pos: curve(&[0.0, 0.3, 0.4]),
                    f_neg: curve(&[0.0, 0.1]),
                },
            ],
        )
        .unwrap();
        assert_eq!(ResponseModel::from_json(&model.to_json()).unwrap(), model);
        assert!(ResponseModel::new(vec![2], vec![]).is_err());
    }
}
