//! Welfare of a seed set: exact, surrogate, plug-in and IPS values, the
//! identification interval around the surrogate, and a labelled error
//! budget.

use serde::{Deserialize, Serialize};

use crate::diffusion::{bernstein_radius, exact_law, ExactDiffusionLaw, ExposureEstimate};
use crate::error::{Error, Result};
use crate::graph::{
    exposure_counts, path_constants, DirectedGraph, ExposureSpec, PathConstants, PathLimits,
    SeedSet, Sign,
};
use crate::response::{
    fit_shape_constrained, ips_weights, FitOptions, LoggedDataset, ResponseModel,
};

fn check_lengths(model: &ResponseModel, n: usize) -> Result<()> {
    if model.n() != n {
        return Err(Error::LengthMismatch {
            expected: model.n(),
            got: n,
        });
    }
    Ok(())
}

/// `F~(S) = sum_i alpha_i 1{i in S} + f_i^+(k_i^+) - f_i^-(k_i^-)` with the
/// curves read through their linear interpolation.
pub fn surrogate_value(
    seeds: &SeedSet,
    model: &ResponseModel,
    k_pos: &[f64],
    k_neg: &[f64],
) -> Result<f64> {
    check_lengths(model, k_pos.len())?;
    check_lengths(model, k_neg.len())?;
    if let Some(&bad) = seeds.members().iter().find(|&&v| v >= model.n()) {
        return Err(Error::NodeOutOfRange {
            node: bad,
            n: model.n(),
        });
    }
    let mut total = 0.0;
    for i in 0..model.n() {
        let r = model.node(i);
        if !(k_pos[i].is_finite() && k_neg[i].is_finite()) {
            return Err(Error::NonFinite("expected exposure"));
        }
        if seeds.contains(i) {
            total += r.alpha;
        }
        total += r.f_pos.interp(k_pos[i])? - r.f_neg.interp(k_neg[i])?;
    }
    Ok(total)
}

/// Exact welfare `F(S) = E[sum_i Y_i(z_inf(S))]` under a known law.
pub fn welfare_under_law(
    law: &ExactDiffusionLaw,
    spec: &ExposureSpec,
    model: &ResponseModel,
) -> Result<f64> {
    check_lengths(model, law.n())?;
    let seeds = SeedSet::exact(law.seeds().to_vec(), law.n())?;
    let mask = seeds.mask(law.n());
    let mut total = 0.0;
    for (z, p) in law.support_vectors() {
        let counts = exposure_counts(&z, spec)?;
        total += p * model.welfare_at(&mask, &counts);
    }
    Ok(total)
}

/// Exact welfare by enumerating every live-edge configuration.
pub fn true_welfare(
    seeds: &SeedSet,
    g: &DirectedGraph,
    spec: &ExposureSpec,
    model: &ResponseModel,
) -> Result<f64> {
    check_lengths(model, g.n())?;
    let law = exact_law(seeds, g, spec)?;
    welfare_under_law(&law, spec, model)
}

/// Plug-in welfare from a fitted model and Monte-Carlo exposures.
pub fn plugin_value(
    seeds: &SeedSet,
    fitted: &ResponseModel,
    est: &ExposureEstimate,
) -> Result<f64> {
    if est.seeds != seeds.members() {
        return Err(Error::Precondition(format!(
            "exposure estimate was produced for {:?}, not {:?}",
            est.seeds,
            seeds.members()
        )));
    }
    surrogate_value(seeds, fitted, &est.k_hat_pos, &est.k_hat_neg)
}

/// Seed-set-level inverse propensity estimate of `F(S)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpsEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub matched: usize,
    pub replications: usize,
    /// `(1/N) sum W^2`, reported as a variance proxy.
    pub weight_second_moment: f64,
    pub effective_sample_size: f64,
    pub self_normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// `(1/N) sum_l W_l(S) sum_i Y_il` with `W_l = 1{Z_l = S} / pi_l`.
pub fn ips_value(data: &LoggedDataset, seeds: &SeedSet) -> Result<IpsEstimate> {
    ips_estimate(data, seeds, false)
}

/// Self-normalized variant `sum W Y / sum W`; not covered by the
/// unbiasedness result.
pub fn snips_value(data: &LoggedDataset, seeds: &SeedSet) -> Result<IpsEstimate> {
    ips_estimate(data, seeds, true)
}

fn ips_estimate(data: &LoggedDataset, seeds: &SeedSet, normalize: bool) -> Result<IpsEstimate> {
    let n = data.len();
    if n == 0 {
        return Err(Error::InvalidData("dataset has no replications".into()));
    }
    let w = ips_weights(data, seeds)?;
    let ess = w.effective_sample_size();
    let second = w.weights.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if w.matched == 0 {
        return Ok(IpsEstimate {
            estimate: 0.0,
            stderr: 0.0,
            matched: 0,
            replications: n,
            weight_second_moment: 0.0,
            effective_sample_size: 0.0,
            self_normalized: normalize,
            warning: Some("target seed set never logged".into()),
        });
    }
    let terms: Vec<f64> = data
        .replications
        .iter()
        .zip(&w.weights)
        .map(|(rep, wl)| wl * rep.welfare())
        .collect();
    let nf = n as f64;
    let mean = terms.iter().sum::<f64>() / nf;
    let sd = if n > 1 {
        (terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt()
    } else {
        0.0
    };
    let (estimate, stderr) = if normalize {
        let wsum: f64 = w.weights.iter().sum();
        let est = terms.iter().sum::<f64>() / wsum;
        // Delta-method standard error of the ratio.
        let resid: f64 = data
            .replications
            .iter()
            .zip(&w.weights)
            .map(|(rep, wl)| (wl * (rep.welfare() - est)).powi(2))
            .sum();
        (est, resid.sqrt() / wsum)
    } else {
        (mean, sd / nf.sqrt())
    };
    let warning = (ess < 10.0).then(|| format!("effective sample size {ess:.2} is small"));
    Ok(IpsEstimate {
        estimate,
        stderr,
        matched: w.matched,
        replications: n,
        weight_second_moment: second,
        effective_sample_size: ess,
        self_normalized: normalize,
        warning,
    })
}

/// `B_str = 1/2 sum_i (kappa_i^+ C_i^+ + kappa_i^- C_i^-)`.
pub fn structural_bound_from(constants: &[PathConstants], model: &ResponseModel) -> Result<f64> {
    check_lengths(model, constants.len())?;
    Ok(0.5
        * constants
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let r = model.node(i);
                r.f_pos.curvature() * c.c_pos as f64 + r.f_neg.curvature() * c.c_neg as f64
            })
            .sum::<f64>())
}

/// Structural constant from the curvatures and exhaustive path constants.
pub fn structural_bound(
    g: &DirectedGraph,
    spec: &ExposureSpec,
    model: &ResponseModel,
    k: usize,
    limits: PathLimits,
    set_limit: u128,
) -> Result<f64> {
    check_lengths(model, g.n())?;
    let constants = path_constants(g, spec, k, limits, set_limit)?;
    structural_bound_from(&constants, model)
}

/// `[F~ - B_str eps^2, F~ + B_str eps^2]`.
pub fn identification_interval(surrogate: f64, b_str: f64, epsilon: f64) -> (f64, f64) {
    let half = b_str * epsilon * epsilon;
    (surrogate - half, surrogate + half)
}

/// Simulation error term `sum_i L_i^± r_i^±` with Bernstein radii at `delta`.
///
/// Without sample variances (`R = 1`) the worst case `M^2 / 4` is used.
pub fn simulation_error(fitted: &ResponseModel, est: &ExposureEstimate, delta: f64) -> Result<f64> {
    check_lengths(fitted, est.k_hat_pos.len())?;
    let mut total = 0.0;
    for sign in Sign::BOTH {
        let bounds = est.bound(sign);
        for i in 0..fitted.n() {
            let m = bounds[i] as f64;
            if m == 0.0 {
                continue;
            }
            let var = est.var(sign).map_or(m * m / 4.0, |v| v[i]);
            let lip = fitted.node(i).curve(sign).lipschitz();
            total += lip * bernstein_radius(var, m, est.r, delta)?;
        }
    }
    Ok(total)
}

/// Delete-a-group jackknife standard error of the plug-in value across
/// refits of the response model. A reporting device, not a certified bound.
pub fn jackknife_response_error(
    data: &LoggedDataset,
    strata: &[usize],
    opts: &FitOptions,
    seeds: &SeedSet,
    est: &ExposureEstimate,
    groups: usize,
) -> Result<f64> {
    let groups = groups.min(data.len());
    if groups < 2 {
        return Err(Error::Precondition(
            "jackknife needs at least two replication groups".into(),
        ));
    }
    let mut values = Vec::with_capacity(groups);
    for g in 0..groups {
        let subset = LoggedDataset {
            replications: data
                .replications
                .iter()
                .enumerate()
                .filter(|(l, _)| l % groups != g)
                .map(|(_, r)| r.clone())
                .collect(),
        };
        let fit = fit_shape_constrained(&subset, strata, opts)?;
        values.push(plugin_value(seeds, &fit.model, est)?);
    }
    let gf = groups as f64;
    let mean = values.iter().sum::<f64>() / gf;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Ok(((gf - 1.0) / gf * ss).sqrt())
}

/// Named error terms. None of them is a certified constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    /// `B_str eps^2`.
    pub structural: Option<f64>,
    /// Jackknife spread of the plug-in value; absent without logged data.
    pub response_estimation: Option<f64>,
    /// Lipschitz-weighted Bernstein radii.
    pub simulation: f64,
    pub delta: f64,
    pub certified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelfareReport {
    pub seeds: Vec<usize>,
    pub budget: usize,
    /// Exhaustive `F(S)` under the reference model, when enumerable.
    pub f_exact: Option<f64>,
    /// `F~(S)` under the reference model, at exact exposures when
    /// enumerable and at the Monte-Carlo ones otherwise.
    pub f_surrogate: f64,
    pub f_plugin: f64,
    pub f_ips: Option<IpsEstimate>,
    pub interval: Option<(f64, f64)>,
    pub b_str: Option<f64>,
    pub epsilon: f64,
    pub epsilon_overridden: bool,
    /// `true` when a ground-truth model was supplied as reference.
    pub reference_is_truth: bool,
    pub error_budget: ErrorBudget,
    pub notes: Vec<String>,
}

/// Everything needed to assemble a [`WelfareReport`].
pub struct ReportInputs<'a> {
    pub seeds: &'a SeedSet,
    pub graph: &'a DirectedGraph,
    pub spec: &'a ExposureSpec,
    pub fitted: &'a ResponseModel,
    /// Ground truth when known; otherwise the fitted model is the reference.
    pub truth: Option<&'a ResponseModel>,
    pub estimate: &'a ExposureEstimate,
    pub data: Option<&'a LoggedDataset>,
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub limits: PathLimits,
    pub set_limit: u128,
    /// Precomputed jackknife spread, if any.
    pub response_error: Option<f64>,
}

pub fn welfare_report(inp: &ReportInputs<'_>) -> Result<WelfareReport> {
    let reference = inp.truth.unwrap_or(inp.fitted);
    check_lengths(reference, inp.graph.n())?;
    check_lengths(inp.fitted, inp.graph.n())?;
    let mut notes = Vec::new();

    let law = match exact_law(inp.seeds, inp.graph, inp.spec) {
        Ok(law) => Some(law),
        Err(e) if e.is_resource_guard() => {
            notes.push(format!("exact welfare skipped: {e}"));
            None
        }
        Err(e) => return Err(e),
    };
    let (f_exact, f_surrogate) = match &law {
        Some(law) => (
            Some(welfare_under_law(law, inp.spec, reference)?),
            surrogate_value(inp.seeds, reference, &law.k(Sign::Pos), &law.k(Sign::Neg))?,
        ),
        None => (
            None,
            surrogate_value(
                inp.seeds,
                reference,
                &inp.estimate.k_hat_pos,
                &inp.estimate.k_hat_neg,
            )?,
        ),
    };
    let f_plugin = plugin_value(inp.seeds, inp.fitted, inp.estimate)?;
    let f_ips = inp.data.map(|d| ips_value(d, inp.seeds)).transpose()?;

    let epsilon = inp.epsilon.unwrap_or_else(|| inp.graph.epsilon());
    let b_str = match structural_bound(
        inp.graph,
        inp.spec,
        reference,
        inp.seeds.budget(),
        inp.limits,
        inp.set_limit,
    ) {
        Ok(b) => Some(b),
        Err(e) if e.is_resource_guard() => {
            notes.push(format!("structural constant skipped: {e}"));
            None
        }
        Err(e) => return Err(e),
    };
    let interval = b_str.map(|b| identification_interval(f_surrogate, b, epsilon));

    Ok(WelfareReport {
        seeds: inp.seeds.members().to_vec(),
        budget: inp.seeds.budget(),
        f_exact,
        f_surrogate,
        f_plugin,
        f_ips,
        interval,
        b_str,
        epsilon,
        epsilon_overridden: inp.epsilon.is_some(),
        reference_is_truth: inp.truth.is_some(),
        error_budget: ErrorBudget {
            structural: b_str.map(|b| b * epsilon * epsilon),
            response_estimation: inp.response_error,
            simulation: simulation_error(inp.fitted, inp.estimate, inp.delta)?,
            delta: inp.delta,
            certified: false,
        },
        notes,
    })
}

#[derive(Serialize)]
struct ReportFile<'a> {
    format_version: u32,
    #[serde(flatten)]
    report: &'a WelfareReport,
}

impl WelfareReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ReportFile {
            format_version: crate::FORMAT_VERSION,
            report: self,
        })
        .expect("report serializes")
    }

    pub const CSV_HEADER: [&'static str; 13] = [
        "seeds",
        "f_exact",
        "f_surrogate",
        "f_plugin",
        "f_ips",
        "f_ips_stderr",
        "lo",
        "hi",
        "b_str",
        "epsilon",
        "err_structural",
        "err_response",
        "err_simulation",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            opt(self.f_exact),
            self.f_surrogate.to_string(),
            self.f_plugin.to_string(),
            opt(self.f_ips.as_ref().map(|x| x.estimate)),
            opt(self.f_ips.as_ref().map(|x| x.stderr)),
            opt(self.interval.map(|x| x.0)),
            opt(self.interval.map(|x| x.1)),
            opt(self.b_str),
            self.epsilon.to_string(),
            opt(self.error_budget.structural),
            opt(self.error_budget.response_estimation),
            self.error_budget.simulation.to_string(),
        ]
    }
}
