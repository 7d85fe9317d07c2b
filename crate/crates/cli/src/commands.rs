use std::fmt;
use std::path::Path;

use cim_core::diffusion::mc_exposures;
use cim_core::estimand::{jackknife_response_error, welfare_report, ReportInputs, WelfareReport};
use cim_core::graph::{
    parse_graph, DirectedGraph, ExposureSpec, PathLimits, SeedSet, DEFAULT_SET_LIMIT,
};
use cim_core::io::{check_format_version, read_text};
use cim_core::response::{
    check_shape as shape_verdict, fit_shape_constrained, FitOptions, LoggedDataset, ResponseModel,
    Weighting,
};
use cim_core::rng::RngStream;
use cim_core::selection::{baseline_select, greedy_cim, Baseline, GreedyOptions, SelectionResult};
use cim_core::synth::{
    gen_instance, gen_logged_data, summarize, sweep as run_sweep, ResponseProfile, SweepAxis,
    SweepRow, SynthConfig,
};
use cim_core::verify::{run_verify, Fault, Suite, VerifyOptions};
use cim_core::Error;

use crate::manifest::ManifestBuilder;
use crate::{CheckShapeArgs, EvaluateArgs, FitArgs, GenArgs, SelectArgs, SweepArgs, VerifyArgs};

pub enum CliError {
    Core(Error),
    /// An invariant or shape check failed.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Core(e) if e.is_resource_guard() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Failed(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Core(Error::Config(msg.into()))
}

fn read_input(path: &Path, mb: &mut ManifestBuilder) -> Result<String, CliError> {
    let text = read_text(path)?;
    mb.input(path, text.as_bytes());
    Ok(text)
}

fn read_json_input(path: &Path, mb: &mut ManifestBuilder) -> Result<String, CliError> {
    let text = read_input(path, mb)?;
    check_format_version(&text)?;
    Ok(text)
}

fn to_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for row in rows {
        w.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

fn load_graph(path: &Path, mb: &mut ManifestBuilder) -> Result<DirectedGraph, CliError> {
    Ok(parse_graph(&read_input(path, mb)?)?)
}

fn load_spec(
    path: Option<&Path>,
    g: &DirectedGraph,
    mb: &mut ManifestBuilder,
) -> Result<ExposureSpec, CliError> {
    match path {
        Some(p) => Ok(ExposureSpec::from_json(&read_json_input(p, mb)?, g.n())?),
        None => Ok(ExposureSpec::in_neighbors(g)),
    }
}

fn load_model(path: &Path, mb: &mut ManifestBuilder) -> Result<ResponseModel, CliError> {
    Ok(ResponseModel::from_json(&read_json_input(path, mb)?)?)
}

pub fn gen(args: GenArgs) -> CliResult {
    let mut mb = ManifestBuilder::new("gen", &args);
    let cfg = SynthConfig::from_toml(&read_input(&args.config, &mut mb)?)?;
    mb.seed(cfg.master_seed);
    let inst = gen_instance(&cfg)?;
    let (data, clip) = gen_logged_data(&inst, &cfg)?;
    if clip.clipped > 0 {
        eprintln!(
            "clipped {} of {} outcomes ({:.2}%)",
            clip.clipped,
            clip.total,
            100.0 * clip.fraction()
        );
    }
    let out = &args.out;
    mb.output(out.join("graph.txt"), &inst.graph.to_edge_list())?;
    mb.output(out.join("spec.json"), &inst.spec.to_json())?;
    mb.output(out.join("model.json"), &inst.model.to_json())?;
    mb.output(out.join("data.jsonl"), &data.to_jsonl())?;
    mb.finish(&out.join("manifest.json"))?;
    Ok(())
}

fn load_strata(text: &str) -> Result<Vec<usize>, CliError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(Error::from)?;
    let strata = match &value {
        serde_json::Value::Array(_) => value,
        serde_json::Value::Object(map) => map
            .get("strata")
            .cloned()
            .ok_or_else(|| usage("strata file has no `strata` field"))?,
        _ => return Err(usage("strata file must be a JSON array or a model")),
    };
    serde_json::from_value(strata).map_err(|e| CliError::Core(e.into()))
}

pub fn fit(args: FitArgs) -> CliResult {
    let mut mb = ManifestBuilder::new("fit", &args);
    let data = LoggedDataset::from_jsonl(&read_input(&args.data, &mut mb)?)?;
    let strata = load_strata(&read_json_input(&args.strata, &mut mb)?)?;
    data.validate(Some(strata.len()), None)?;
    let weighting = match args.weighting.as_str() {
        "uniform" => Weighting::Uniform,
        "ips" => {
            if args.target.is_empty() {
                return Err(usage("--weighting ips needs --target"));
            }
            if let Some(l) = data
                .replications
                .iter()
                .position(|r| r.propensity.is_none())
            {
                return Err(usage(format!(
                    "--weighting ips needs logged propensities; replication {l} has none"
                )));
            }
            Weighting::Ips {
                target: args.target.clone(),
                cap: args.ips_cap,
            }
        }
        other => return Err(usage(format!("unknown weighting {other:?}"))),
    };
    let opts = FitOptions {
        b_pos: args.b_pos,
        b_neg: args.b_neg,
        lambda: args.lambda,
        weighting,
        ..FitOptions::default()
    };
    let report = fit_shape_constrained(&data, &strata, &opts)?;
    for (r, s) in report.strata.iter().enumerate() {
        for w in &s.warnings {
            log::warn!("stratum {r}: {w}");
        }
    }
    mb.output(args.out.join("fitted.json"), &report.model.to_json())?;
    let mut diag = serde_json::to_value(&report.strata).map_err(Error::from)?;
    diag = serde_json::json!({ "format_version": cim_core::FORMAT_VERSION, "strata": diag });
    mb.output(
        args.out.join("fit_report.json"),
        &serde_json::to_string_pretty(&diag).map_err(Error::from)?,
    )?;
    mb.finish(&args.out.join("manifest.json"))?;
    Ok(())
}

pub fn select(args: SelectArgs) -> CliResult {
    let mut mb = ManifestBuilder::new("select", &args);
    mb.seed(args.seed);
    let g = load_graph(&args.graph, &mut mb)?;
    let stream = RngStream::new(args.seed);
    let result: SelectionResult = match args.method.as_str() {
        "cim" => {
            let path = args
                .model
                .as_deref()
                .ok_or_else(|| usage("--method cim needs --model"))?;
            let spec = load_spec(args.spec.as_deref(), &g, &mut mb)?;
            let model = load_model(path, &mut mb)?;
            let opts = GreedyOptions {
                k: args.k,
                r: args.r,
                lazy: args.lazy,
                common_random_numbers: !args.no_crn,
            };
            greedy_cim(&g, &spec, &model, &opts, &stream)?
        }
        other => {
            let method: Baseline = other.parse()?;
            baseline_select(method, &g, args.k, args.r, &stream)?
        }
    };
    let result = if args.record_timings {
        result
    } else {
        result.without_timings()
    };
    println!("{}: {:?}", result.method, result.seeds.members());
    mb.output(args.out.join("selection.json"), &result.to_json())?;
    mb.output(
        args.out.join("selection.csv"),
        &to_csv(&SelectionResult::CSV_HEADER, result.csv_rows()),
    )?;
    mb.finish(&args.out.join("manifest.json"))?;
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> CliResult {
    let mut mb = ManifestBuilder::new("evaluate", &args);
    mb.seed(args.seed);
    let g = load_graph(&args.graph, &mut mb)?;
    let spec = load_spec(args.spec.as_deref(), &g, &mut mb)?;
    let fitted = load_model(&args.model, &mut mb)?;
    let truth = args
        .truth
        .as_deref()
        .map(|p| load_model(p, &mut mb))
        .transpose()?;
    let data = match &args.data {
        Some(p) => Some(LoggedDataset::from_jsonl(&read_input(p, &mut mb)?)?),
        None => None,
    };
    let seeds = match &args.selection {
        Some(p) => {
            let v: serde_json::Value =
                serde_json::from_str(&read_json_input(p, &mut mb)?).map_err(Error::from)?;
            let members: Vec<usize> = serde_json::from_value(v["seeds"]["members"].clone())
                .map_err(|_| usage("selection file has no seeds.members"))?;
            let budget = v["seeds"]["budget"]
                .as_u64()
                .unwrap_or(members.len() as u64) as usize;
            SeedSet::new(members, budget, g.n())?
        }
        None => SeedSet::exact(args.seeds.clone(), g.n())?,
    };
    let stream = RngStream::new(args.seed);
    let estimate = mc_exposures(&seeds, &g, &spec, args.r, &stream.named("exposures"))?;
    let response_error = match &data {
        Some(d) if d.len() >= 10 => Some(jackknife_response_error(
            d,
            fitted.strata(),
            &FitOptions::default(),
            &seeds,
            &estimate,
            10,
        )?),
        _ => None,
    };
    let report: WelfareReport = welfare_report(&ReportInputs {
        seeds: &seeds,
        graph: &g,
        spec: &spec,
        fitted: &fitted,
        truth: truth.as_ref(),
        estimate: &estimate,
        data: data.as_ref(),
        epsilon: args.epsilon,
        delta: args.delta,
        limits: PathLimits::default(),
        set_limit: DEFAULT_SET_LIMIT,
        response_error,
    })?;
    for note in &report.notes {
        log::warn!("{note}");
    }
    println!(
        "F~ = {:.6}  F^ = {:.6}{}",
        report.f_surrogate,
        report.f_plugin,
        report
            .f_exact
            .map(|f| format!("  F = {f:.6}"))
            .unwrap_or_default()
    );
    mb.output(args.out.join("report.json"), &report.to_json())?;
    mb.output(
        args.out.join("report.csv"),
        &to_csv(&WelfareReport::CSV_HEADER, [report.csv_row()]),
    )?;
    mb.finish(&args.out.join("manifest.json"))?;
    Ok(())
}

pub fn verify(args: VerifyArgs) -> CliResult {
    let mut mb = ManifestBuilder::new("verify", &args);
    mb.seed(args.seed);
    let suites = Suite::parse_list(&args.suite)?;
    let mut opts = VerifyOptions {
        instances: args.instances,
        seed: args.seed,
        k: args.k,
        ..VerifyOptions::default()
    };
    opts.shape.profile = match args.profile.as_str() {
        "linear" => ResponseProfile::Linear,
        "concave" => ResponseProfile::Concave,
        "mixed" => ResponseProfile::Mixed,
        other => return Err(usage(format!("unknown profile {other:?}"))),
    };
    opts.fault = match args.inject_fault.as_deref() {
        None => None,
        Some("convex-curve" | "convex_curve") => Some(Fault::ConvexCurve),
        Some(other) => return Err(usage(format!("unknown fault {other:?}"))),
    };
    let report = run_verify(&suites, &opts)?;
    for s in &report.suites {
        println!(
            "{:<10} {} instances={} checks={} skipped={} worst_ratio={:.4} failures={}",
            s.suite.name(),
            if s.passed() { "PASS" } else { "FAIL" },
            s.instances,
            s.checks,
            s.skipped,
            s.worst_ratio,
            s.failures.len()
        );
    }
    let first = report.suites.iter().flat_map(|s| s.failures.first()).next();
    if let Some(out) = &args.out {
        mb.output(out.join("verify.json"), &report.to_json())?;
        if let Some(r) = first {
            mb.output(
                out.join("reproducer.json"),
                &serde_json::to_string_pretty(r).map_err(Error::from)?,
            )?;
        }
        mb.finish(&out.join("manifest.json"))?;
    }
    match first {
        None => Ok(()),
        Some(r) => {
            eprintln!(
                "reproducer: {}",
                serde_json::to_string_pretty(r).map_err(Error::from)?
            );
            Err(CliError::Failed(format!(
                "{} suite failed on instance {} (seed {}): {}",
                r.suite.name(),
                r.index,
                r.master_seed,
                r.detail
            )))
        }
    }
}

pub fn sweep(args: SweepArgs) -> CliResult {
    let mut mb = ManifestBuilder::new("sweep", &args);
    let mut cfg = SynthConfig::from_toml(&read_input(&args.config, &mut mb)?)?;
    if let Some(r) = args.repetitions {
        cfg.pipeline.repetitions = r;
    }
    mb.seed(cfg.master_seed);
    let axis: SweepAxis = args.axis.parse()?;
    let rows = run_sweep(axis, &args.values, &cfg)?;
    mb.output(
        args.out.join("matrix.csv"),
        &to_csv(&SweepRow::CSV_HEADER, rows.iter().map(SweepRow::csv_record)),
    )?;
    let welfare = summarize(&rows, |r| Some(r.welfare));
    let gap = summarize(&rows, |r| r.oracle_gap);
    let summary = welfare.iter().map(|(v, m, w)| {
        let g = gap
            .iter()
            .find(|(gv, gm, _)| gv == v && gm == m)
            .map(|x| x.2.to_string())
            .unwrap_or_default();
        vec![v.to_string(), m.clone(), w.to_string(), g]
    });
    mb.output(
        args.out.join("summary.csv"),
        &to_csv(
            &[axis.name(), "method", "mean_welfare", "mean_oracle_gap"],
            summary,
        ),
    )?;
    mb.finish(&args.out.join("manifest.json"))?;
    Ok(())
}

pub fn check_shape(args: CheckShapeArgs) -> CliResult {
    let curves: Vec<(String, Vec<f64>)> = match &args.model {
        Some(p) => {
            let text = read_text(p)?;
            check_format_version(&text)?;
            // Read without validation so that infeasible files can be diagnosed.
            let v: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
            let responses = v["responses"]
                .as_array()
                .ok_or_else(|| usage("model file has no `responses` array"))?;
            let mut out = Vec::new();
            for (r, resp) in responses.iter().enumerate() {
                for key in ["f_pos", "f_neg"] {
                    let values: Vec<f64> =
                        serde_json::from_value(resp[key].clone()).map_err(|_| {
                            usage(format!("stratum {r}: `{key}` is not a list of numbers"))
                        })?;
                    out.push((format!("stratum {r} {key}"), values));
                }
            }
            out
        }
        None if !args.values.is_empty() => vec![("values".into(), args.values.clone())],
        None => return Err(usage("check-shape needs --model or --values")),
    };
    let mut bad = 0;
    for (name, values) in &curves {
        let verdict = shape_verdict(values);
        if verdict.is_valid() {
            println!("{name}: ok");
        } else {
            bad += 1;
            for v in &verdict.violations {
                println!("{name}: {v}");
            }
        }
    }
    if bad == 0 {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "{bad} curve(s) violate the shape constraints"
        )))
    }
}
