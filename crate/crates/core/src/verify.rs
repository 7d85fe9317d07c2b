//! Randomized invariant checks on enumeration-scale instances.
//!
//! Each suite draws `M` instances from [`random_small_instance`], evaluates
//! the relevant quantities exactly, and records a reproducer for every
//! violated inequality. Instance `m` of suite `s` is drawn from
//! `RngStream::new(seed).named(s).child(m)`, so any failure can be
//! regenerated from the triple `(seed, suite, m)` alone.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::exact_law;
use crate::error::{Error, Result};
use crate::estimand::{surrogate_value, welfare_under_law};
use crate::graph::{path_constants, subsets_upto, PathLimits, SeedSet, Sign, DEFAULT_SET_LIMIT};
use crate::response::{
    check_shape, fit_shape_constrained, FitOptions, ResponseCurve, ResponseModel,
};
use crate::rng::{RngStream, SimRng};
use crate::selection::end_to_end_check;
use crate::synth::{
    logged_data_from_stream, random_curve, random_small_instance, DataConfig, Instance,
    PolicyConfig, ResponseProfile, SmallInstanceShape,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Reduction,
    Moments,
    Jensen,
    Estimation,
    End2end,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Reduction,
        Suite::Moments,
        Suite::Jensen,
        Suite::Estimation,
        Suite::End2end,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Reduction => "reduction",
            Suite::Moments => "moments",
            Suite::Jensen => "jensen",
            Suite::Estimation => "estimation",
            Suite::End2end => "end2end",
        }
    }

    /// Parse a suite name; `all` expands to every suite.
    pub fn parse_list(s: &str) -> Result<Vec<Suite>> {
        match s {
            "all" => Ok(Suite::ALL.to_vec()),
            "reduction" => Ok(vec![Suite::Reduction]),
            "moments" => Ok(vec![Suite::Moments]),
            "jensen" => Ok(vec![Suite::Jensen]),
            "estimation" => Ok(vec![Suite::Estimation]),
            "end2end" => Ok(vec![Suite::End2end]),
            other => Err(Error::Config(format!("unknown suite {other:?}"))),
        }
    }
}

/// Deliberate defects for exercising the failure path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Replace one response curve by a convex one.
    ConvexCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub instances: usize,
    pub seed: u64,
    /// Seed budget for the set-enumerating suites.
    pub k: usize,
    pub shape: SmallInstanceShape,
    /// Absolute slack on every inequality.
    pub tol: f64,
    /// (curve, law) pairs drawn per Jensen instance.
    pub jensen_pairs: usize,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 0,
            k: 2,
            shape: SmallInstanceShape::default(),
            tol: 1e-9,
            jensen_pairs: 50,
            fault: None,
        }
    }
}

/// Everything needed to reproduce one violation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reproducer {
    pub suite: Suite,
    pub master_seed: u64,
    pub index: usize,
    pub stream_seed: u64,
    pub seeds: Option<Vec<usize>>,
    pub detail: String,
    /// Edge list of the instance graph.
    pub graph: Option<String>,
    pub spec: Option<serde_json::Value>,
    pub model: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub instances: usize,
    /// Inequalities evaluated.
    pub checks: usize,
    /// Instances where the check did not apply.
    pub skipped: usize,
    /// Largest ratio of measured quantity to its bound, where defined.
    pub worst_ratio: f64,
    pub failures: Vec<Reproducer>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }

    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v["format_version"] = crate::FORMAT_VERSION.into();
        serde_json::to_string_pretty(&v).expect("report serializes")
    }
}

/// Outcome of one instance: checks made, worst ratio, violations.
#[derive(Default)]
struct Outcome {
    checks: usize,
    skipped: bool,
    worst_ratio: f64,
    failures: Vec<(Option<Vec<usize>>, String)>,
}

impl Outcome {
    fn check(
        &mut self,
        lhs: f64,
        rhs: f64,
        tol: f64,
        seeds: Option<&[usize]>,
        what: impl FnOnce() -> String,
    ) {
        self.checks += 1;
        if rhs > tol && lhs.is_finite() {
            self.worst_ratio = self.worst_ratio.max(lhs / rhs);
        }
        if !(lhs <= rhs + tol) {
            self.failures.push((seeds.map(<[usize]>::to_vec), what()));
        }
    }
}

fn inject(inst: &mut Instance) {
    let n = inst.model.n();
    let mut responses = inst.model.responses().to_vec();
    let node = (0..n).find(|&i| inst.spec.pos(i).len() >= 2);
    let (stratum, b) = match node {
        Some(i) => (inst.model.strata()[i], inst.spec.pos(i).len()),
        None => (inst.model.strata()[0], 2),
    };
    let values = (0..=b).map(|t| 0.05 * (t * t) as f64).collect();
    responses[stratum].f_pos = ResponseCurve::new_unchecked(values);
    inst.model = ResponseModel::new(inst.model.strata().to_vec(), responses).expect("same strata");
}

fn model_shape(model: &ResponseModel, out: &mut Outcome) {
    for (r, resp) in model.responses().iter().enumerate() {
        for sign in Sign::BOTH {
            out.checks += 1;
            let verdict = check_shape(resp.curve(sign).values());
            if !verdict.is_valid() {
                out.failures.push((
                    None,
                    format!(
                        "stratum {r} {sign:?} curve fails the shape check: {}",
                        verdict.violations[0]
                    ),
                ));
            }
        }
    }
}

fn suite_reduction(inst: &Instance, opts: &VerifyOptions, out: &mut Outcome) -> Result<()> {
    let (g, spec, model) = (&inst.graph, &inst.spec, &inst.model);
    let eps = g.epsilon();
    let constants = path_constants(g, spec, opts.k, PathLimits::default(), DEFAULT_SET_LIMIT)?;
    let b_str = crate::estimand::structural_bound_from(&constants, model)?;
    let bound = b_str * eps * eps;
    for set in subsets_upto(g.n(), opts.k) {
        let seeds = SeedSet::exact(set.clone(), g.n())?;
        let law = exact_law(&seeds, g, spec)?;
        let f = welfare_under_law(&law, spec, model)?;
        let ft = surrogate_value(&seeds, model, &law.k(Sign::Pos), &law.k(Sign::Neg))?;
        let gap = (f - ft).abs();
        out.check(gap, bound, opts.tol, Some(&set), || {
            format!(
                "|F - F~| = {gap:e} exceeds B_str eps^2 = {bound:e} (B_str = {b_str}, eps = {eps})"
            )
        });
    }
    Ok(())
}

fn suite_moments(inst: &Instance, opts: &VerifyOptions, out: &mut Outcome) -> Result<()> {
    let (g, spec) = (&inst.graph, &inst.spec);
    let eps = g.epsilon();
    let constants = path_constants(g, spec, opts.k, PathLimits::default(), DEFAULT_SET_LIMIT)?;
    for set in subsets_upto(g.n(), opts.k) {
        let seeds = SeedSet::exact(set.clone(), g.n())?;
        let law = exact_law(&seeds, g, spec)?;
        for (i, m) in law.exposures().iter().enumerate() {
            for sign in Sign::BOTH {
                let d = constants[i].d(sign) as f64 * eps;
                let c = constants[i].c(sign) as f64 * eps * eps;
                let (eu, eu2) = (m.eu(sign), m.eu2(sign));
                out.check(eu, d, opts.tol, Some(&set), || {
                    format!("node {i} {sign:?}: E[U] = {eu:e} exceeds D eps = {d:e}")
                });
                out.check(eu2, c, opts.tol, Some(&set), || {
                    format!("node {i} {sign:?}: E[(U)_2] = {eu2:e} exceeds C eps^2 = {c:e}")
                });
            }
        }
    }
    Ok(())
}

/// One Jensen-gap trial: a curve, an offset `t` and a law of `U` on
/// `0..=B-t`, with exact expectations.
pub struct JensenTrial {
    pub curve: ResponseCurve,
    pub t: usize,
    pub law: Vec<f64>,
}

impl JensenTrial {
    pub fn draw(rng: &mut SimRng, max_b: usize, linear: bool) -> Self {
        let b = rng.random_range(1..=max_b.max(1));
        let curve = random_curve(rng, b, 1.0, linear);
        let t = rng.random_range(0..=b);
        let top = b - t;
        let mut law: Vec<f64> = (0..=top)
            .map(|_| {
                // Sparse laws exercise point masses and two-point laws.
                if rng.random::<f64>() < 0.4 {
                    0.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let total: f64 = law.iter().sum();
        if total == 0.0 {
            law[0] = 1.0;
        } else {
            law.iter_mut().for_each(|p| *p /= total);
        }
        Self { curve, t, law }
    }

    /// `(f(t + E U) - E f(t + U), (kappa / 2) E[U (U - 1)])`.
    pub fn gap_and_bound(&self) -> Result<(f64, f64)> {
        let mean: f64 = self.law.iter().enumerate().map(|(u, p)| u as f64 * p).sum();
        let ef: f64 = self
            .law
            .iter()
            .enumerate()
            .map(|(u, p)| p * self.curve.at(self.t + u))
            .sum();
        let fact: f64 = self
            .law
            .iter()
            .enumerate()
            .map(|(u, p)| p * (u * u.saturating_sub(1)) as f64)
            .sum();
        let gap = self.curve.interp(self.t as f64 + mean)? - ef;
        Ok((gap, 0.5 * self.curve.curvature() * fact))
    }
}

fn suite_jensen(rng: &mut SimRng, opts: &VerifyOptions, out: &mut Outcome) -> Result<()> {
    let linear = opts.shape.profile == ResponseProfile::Linear;
    for _ in 0..opts.jensen_pairs {
        let mut trial = JensenTrial::draw(rng, opts.shape.max_b.max(1), linear);
        if opts.fault == Some(Fault::ConvexCurve) {
            let b = trial.curve.b().max(2);
            trial.curve =
                ResponseCurve::new_unchecked((0..=b).map(|t| 0.05 * (t * t) as f64).collect());
            trial.t = 0;
            trial.law = vec![0.0; b + 1];
            trial.law[0] = 0.5;
            trial.law[b] = 0.5;
        }
        let (gap, bound) = trial.gap_and_bound()?;
        let values = trial.curve.values().to_vec();
        let (t, law) = (trial.t, trial.law.clone());
        out.check(-gap, 0.0, opts.tol, None, || {
            format!("negative Jensen gap {gap:e} for curve {values:?}, t = {t}, law {law:?}")
        });
        let values = trial.curve.values().to_vec();
        out.check(gap, bound, opts.tol, None, || {
            format!("Jensen gap {gap:e} exceeds (kappa/2) E[(U)_2] = {bound:e} for curve {values:?}, t = {}, law {:?}", trial.t, trial.law)
        });
    }
    Ok(())
}

fn policy_for(inst: &Instance, rng: &mut SimRng, k: usize) -> PolicyConfig {
    let n = inst.graph.n();
    let k = k.clamp(1, n);
    let mut sets: Vec<Vec<usize>> = Vec::new();
    for _ in 0..4 {
        let size = rng.random_range(1..=k);
        let mut s = rand::seq::index::sample(rng, n, size).into_vec();
        s.sort_unstable();
        if !sets.contains(&s) {
            sets.push(s);
        }
    }
    PolicyConfig::Uniform { sets }
}

fn suite_estimation(
    inst: &Instance,
    stream: &RngStream,
    opts: &VerifyOptions,
    out: &mut Outcome,
) -> Result<()> {
    let mut rng = stream.named("policy").rng();
    let policy = policy_for(inst, &mut rng, opts.k);
    let data_cfg = DataConfig {
        noise_sigma: 0.0,
        replications: 60,
    };
    let (data, _) = logged_data_from_stream(inst, &policy, &data_cfg, &stream.named("data"))?;
    let report = fit_shape_constrained(&data, inst.model.strata(), &FitOptions::default())?;
    model_shape(&report.model, out);
    // Noiseless data from a feasible model: the fit interpolates every cell.
    let mut worst = 0.0f64;
    for rep in &data.replications {
        for row in &rep.rows {
            let fitted = report.model.node(row.i).outcome(row.z == 1, row.kp, row.kn);
            worst = worst.max((fitted - row.y).abs());
        }
    }
    out.check(worst, 1e-6, 0.0, None, || {
        format!("noiseless fit misses an observed cell by {worst:e}")
    });
    Ok(())
}

fn suite_end2end(
    inst: &Instance,
    stream: &RngStream,
    opts: &VerifyOptions,
    out: &mut Outcome,
) -> Result<()> {
    let mut rng = stream.named("policy").rng();
    let policy = policy_for(inst, &mut rng, opts.k);
    let data_cfg = DataConfig {
        noise_sigma: 0.1,
        replications: 100,
    };
    let (data, _) = logged_data_from_stream(inst, &policy, &data_cfg, &stream.named("data"))?;
    let fitted = fit_shape_constrained(&data, inst.model.strata(), &FitOptions::default())?.model;
    let k = opts.k.min(inst.graph.n());
    let rep = end_to_end_check(
        &inst.graph,
        &inst.spec,
        &inst.model,
        &fitted,
        k,
        200,
        &stream.named("bank"),
        None,
    )?;
    match (rep.holds, rep.rhs) {
        (Some(_), Some(rhs)) => {
            let (lhs, sel) = (rep.f_selected, rep.selected.clone());
            out.check(rhs, lhs, 1e-9, Some(&sel), || {
                format!(
                    "F(S^) = {lhs} below rho max F - (1 + rho)(D_est + D_str) = {rhs} (rho = {:?}, D_est = {}, D_str = {})",
                    rep.rho, rep.delta_est, rep.delta_str
                )
            });
        }
        _ => out.skipped = true,
    }
    Ok(())
}

fn instance_dump(
    inst: &Instance,
) -> (
    Option<String>,
    Option<serde_json::Value>,
    Option<serde_json::Value>,
) {
    (
        Some(inst.graph.to_edge_list()),
        serde_json::from_str(&inst.spec.to_json()).ok(),
        serde_json::from_str(&inst.model.to_json()).ok(),
    )
}

fn run_instance(
    suite: Suite,
    index: usize,
    opts: &VerifyOptions,
) -> Result<(Outcome, Vec<Reproducer>)> {
    let stream = RngStream::new(opts.seed)
        .named(suite.name())
        .child(index as u64);
    let mut rng = stream.rng();
    let mut out = Outcome::default();
    let mut inst = None;
    if suite == Suite::Jensen {
        suite_jensen(&mut rng, opts, &mut out)?;
    } else {
        let mut i = random_small_instance(&mut rng, &opts.shape)?;
        if opts.fault == Some(Fault::ConvexCurve) {
            inject(&mut i);
        }
        model_shape(&i.model, &mut out);
        if out.failures.is_empty() {
            match suite {
                Suite::Reduction => suite_reduction(&i, opts, &mut out)?,
                Suite::Moments => suite_moments(&i, opts, &mut out)?,
                Suite::Estimation => suite_estimation(&i, &stream, opts, &mut out)?,
                Suite::End2end => suite_end2end(&i, &stream, opts, &mut out)?,
                Suite::Jensen => unreachable!(),
            }
        }
        inst = Some(i);
    }
    let (graph, spec, model) = inst
        .as_ref()
        .map(instance_dump)
        .unwrap_or((None, None, None));
    let repro = out
        .failures
        .iter()
        .map(|(seeds, detail)| Reproducer {
            suite,
            master_seed: opts.seed,
            index,
            stream_seed: stream.seed(),
            seeds: seeds.clone(),
            detail: detail.clone(),
            graph: graph.clone(),
            spec: spec.clone(),
            model: model.clone(),
        })
        .collect();
    Ok((out, repro))
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<SuiteReport> {
    if opts.instances == 0 {
        return Err(Error::Config(
            "verification needs at least one instance".into(),
        ));
    }
    let results = (0..opts.instances)
        .into_par_iter()
        .map(|m| run_instance(suite, m, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut report = SuiteReport {
        suite,
        instances: opts.instances,
        checks: 0,
        skipped: 0,
        worst_ratio: 0.0,
        failures: Vec::new(),
    };
    for (out, repro) in results {
        report.checks += out.checks;
        report.skipped += out.skipped as usize;
        report.worst_ratio = report.worst_ratio.max(out.worst_ratio);
        report.failures.extend(repro);
    }
    Ok(report)
}

pub fn run_verify(suites: &[Suite], opts: &VerifyOptions) -> Result<VerifyReport> {
    let suites = suites
        .iter()
        .map(|&s| run_suite(s, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport {
        seed: opts.seed,
        suites,
    })
}

/// Rebuild the instance a reproducer points at.
pub fn regenerate(repro: &Reproducer, shape: &SmallInstanceShape) -> Result<Option<Instance>> {
    if repro.suite == Suite::Jensen {
        return Ok(None);
    }
    let stream = RngStream::new(repro.master_seed)
        .named(repro.suite.name())
        .child(repro.index as u64);
    random_small_instance(&mut stream.rng(), shape).map(Some)
}
