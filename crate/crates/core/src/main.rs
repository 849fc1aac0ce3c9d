use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use mnar_tensor::estimator::{bic, fit, select_rank, FitOptions};
use mnar_tensor::family::{Family, FamilyKind};
use mnar_tensor::inference::test_mnar;
use mnar_tensor::io::{read_coo, read_model, write_coo, write_coo_to, write_model, write_replicates_to};
use mnar_tensor::likelihood::{objective, ModelState, Problem};
use mnar_tensor::missingness::{probability_tensor, slice_diagnostics};
use mnar_tensor::sim::{auc, expected_observed_fraction, generate, run_experiment, Protocol, ScenarioSpec};
use mnar_tensor::tensor::{multi_index, num_entries, Dims, MaskedData};

#[derive(Parser)]
#[command(name = "mnar-tensor", version, about = "Low-rank tensor completion with informative missingness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation scenario and report per-replicate rows and aggregates.
    Simulate(SimulateArgs),
    /// Fit a model to observed entries.
    Fit(FitArgs),
    /// Predict natural parameters, means and observation probabilities.
    Predict(PredictArgs),
    /// Score a model on held-out entries.
    Eval(EvalArgs),
    /// Test whether missingness depends on the unobserved values.
    TestMnar(TestArgs),
    /// Choose the CP rank by BIC.
    SelectRank(SelectArgs),
    /// Report identifiability diagnostics for a fitted model.
    Diagnose(DiagnoseArgs),
}

fn parse_dims(s: &str) -> std::result::Result<Dims, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated sizes, got {s:?}"));
    }
    let mut dims = [0; 3];
    for (d, p) in dims.iter_mut().zip(parts) {
        *d = p.trim().parse().map_err(|e| format!("{p:?}: {e}"))?;
        if *d == 0 {
            return Err("sizes must be positive".into());
        }
    }
    Ok(dims)
}

#[derive(Clone, Debug)]
struct Ranks(Vec<usize>);

/// `a..b` and `a..=b` are both inclusive; a comma list is taken as given.
fn parse_ranks(s: &str) -> std::result::Result<Ranks, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    let ranks = if let Some((a, b)) = s.split_once("..") {
        let (lo, hi) = (num(a)?, num(b.trim_start_matches('='))?);
        if lo > hi {
            return Err(format!("empty range {s:?}"));
        }
        (lo..=hi).collect()
    } else {
        s.split(',').map(num).collect::<std::result::Result<Vec<_>, _>>()?
    };
    if ranks.is_empty() || ranks.contains(&0) {
        return Err("ranks must be positive".into());
    }
    Ok(Ranks(ranks))
}

#[derive(Clone, Copy, Debug)]
enum A2Size {
    Count(usize),
    Percent(f64),
}

fn parse_a2(s: &str) -> std::result::Result<A2Size, String> {
    if let Some(p) = s.strip_suffix('%') {
        let p: f64 = p.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
        if !(p > 0.0 && p < 100.0) {
            return Err("percentage must lie in (0, 100)".into());
        }
        Ok(A2Size::Percent(p))
    } else {
        s.trim().parse().map(A2Size::Count).map_err(|e| format!("{s:?}: {e}"))
    }
}

impl A2Size {
    fn resolve(self, dims: Dims) -> usize {
        match self {
            Self::Count(n) => n,
            Self::Percent(p) => (num_entries(dims) as f64 * p / 100.0).round() as usize,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Observations as CSV with header i,j,k,y (zero-based indices).
    #[arg(long)]
    input: PathBuf,
    /// Tensor dimensions, e.g. 42,139,26.
    #[arg(long, value_parser = parse_dims)]
    dims: Dims,
    #[arg(long)]
    family: FamilyKind,
    /// Known dispersion (gaussian only).
    #[arg(long, default_value_t = 1.0)]
    phi0: f64,
    /// Replace each value by 1 if y >= t and 0 otherwise.
    #[arg(long, value_name = "T")]
    binarize_at: Option<f64>,
}

impl DataArgs {
    fn load(&self) -> Result<(MaskedData, Family)> {
        let data = read_coo(&self.input, self.dims, self.binarize_at)
            .with_context(|| format!("reading {}", self.input.display()))?;
        Ok((data, Family::from_kind(self.family, self.phi0)?))
    }
}

#[derive(Args)]
struct SolverArgs {
    /// Seed for initialization and sample splitting.
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    /// Relative objective change that counts as converged.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

impl SolverArgs {
    fn options(&self) -> FitOptions {
        FitOptions { max_outer_iters: self.max_iters, rel_tol: self.tol, ..FitOptions::with_seed(self.seed) }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario file (TOML key = value).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the `protocol` key of the config.
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    /// Base seed; replicate r uses seed + r.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    replicates: Option<usize>,
    /// Worker threads for replicates.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Per-replicate CSV rows.
    #[arg(long)]
    rows: Option<PathBuf>,
    /// Aggregate JSON (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Write the observed entries of replicate 0 as CSV.
    #[arg(long)]
    emit_data: Option<PathBuf>,
    /// Write the true values at the unobserved entries of replicate 0.
    #[arg(long)]
    emit_holdout: Option<PathBuf>,
    /// Write the true model of replicate 0.
    #[arg(long)]
    emit_truth: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Completion,
    RankTuning,
    Testing,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Completion => Protocol::Completion,
            ProtocolArg::RankTuning => Protocol::RankTuning,
            ProtocolArg::Testing => Protocol::Testing,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, required_unless_present = "select_rank", conflicts_with = "select_rank")]
    rank: Option<usize>,
    /// Candidate ranks for BIC selection, e.g. 2..10 or 2,3,5.
    #[arg(long, value_parser = parse_ranks)]
    select_rank: Option<Ranks>,
    /// Where to write the fitted model.
    #[arg(long)]
    model: PathBuf,
    /// Fit summary JSON (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Entries to predict, CSV with header i,j,k,y (y ignored). All entries when omitted.
    #[arg(long)]
    entries: Option<PathBuf>,
    /// Prediction CSV (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Auc,
    Rmse,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Held-out entries, CSV with header i,j,k,y.
    #[arg(long)]
    holdout: PathBuf,
    #[arg(long, value_enum)]
    metric: Metric,
    #[arg(long, value_name = "T")]
    binarize_at: Option<f64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    rank: usize,
    /// Size of the testing set: an entry count or a percentage of the grid (e.g. 10%).
    #[arg(long, value_parser = parse_a2)]
    a2_size: A2Size,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Candidate ranks, e.g. 2..10 or 2,3,5.
    #[arg(long, value_parser = parse_ranks)]
    candidates: Ranks,
    /// Also write the model at the selected rank.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    model: PathBuf,
    /// Observations to report slice coverage for (needs the same dims as the model).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_name = "T")]
    binarize_at: Option<f64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn emit_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit(path, &text)
}

fn load_scenario(path: &Path) -> Result<(ScenarioSpec, Option<Protocol>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let protocol = table
        .remove("protocol")
        .map(|v| v.try_into::<Protocol>())
        .transpose()
        .context("invalid protocol")?;
    let spec: ScenarioSpec = table.try_into().with_context(|| format!("invalid scenario in {}", path.display()))?;
    Ok((spec, protocol))
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let (mut spec, config_protocol) = load_scenario(&a.config)?;
    spec.seed = a.seed;
    if let Some(n) = a.replicates {
        spec.replicates = n;
    }
    let Some(protocol) = a.protocol.map(Protocol::from).or(config_protocol) else {
        bail!("no protocol given in the config or on the command line");
    };
    spec.validate()?;
    if a.emit_data.is_some() || a.emit_holdout.is_some() || a.emit_truth.is_some() {
        let g = generate(&spec)?;
        if let Some(p) = &a.emit_data {
            write_coo(p, &g.data)?;
        }
        if let Some(p) = &a.emit_holdout {
            let mask = g.data.mask().as_slice();
            let rows = (0..num_entries(spec.dims))
                .filter(|&e| !mask[e])
                .map(|e| (multi_index(spec.dims, e), g.y_full.as_slice()[e]));
            write_coo_to(fs::File::create(p)?, rows)?;
        }
        if let Some(p) = &a.emit_truth {
            write_model(p, &g.truth, &[])?;
        }
    }
    let report = run_experiment(&spec, protocol, a.jobs)?;
    if let Some(p) = &a.rows {
        write_replicates_to(fs::File::create(p)?, &report.replicates)?;
    }
    emit_json(
        a.output.as_deref(),
        &json!({
            "protocol": report.protocol,
            "spec": report.spec,
            "replicates": report.replicates.len(),
            "failures": report.failures,
            "aggregates": report.aggregates,
            "rank_counts": report.rank_counts,
            "modal_rank": report.modal_rank(),
        }),
    )
}

fn fit_cmd(a: &FitArgs) -> Result<()> {
    let (data, family) = a.data.load()?;
    let opts = a.solver.options();
    let (report, table) = match (&a.select_rank, a.rank) {
        (Some(candidates), _) => {
            let sel = select_rank(&data, family, &candidates.0, &opts)?;
            (sel.report, Some(sel.bic))
        }
        (None, Some(rank)) => (fit(&data, rank, family, &opts)?, None),
        (None, None) => unreachable!("clap requires --rank or --select-rank"),
    };
    write_model(&a.model, &report.state, &report.objective_trace)?;
    let rank = report.state.cp.rank();
    let summary = json!({
        "rank": rank,
        "bic": table.map(|t| t.into_iter().map(|(r, b)| json!({"rank": r, "bic": finite(b)})).collect::<Vec<_>>()),
        "selected_bic": bic(data.dims(), rank, data.num_observed(), report.final_objective()),
        "objective": report.final_objective(),
        "converged": report.converged,
        "outer_iters": report.outer_iters,
        "theta": report.state.theta,
        "warnings": report.warnings,
        "model": a.model.display().to_string(),
    });
    emit_json(a.output.as_deref(), &summary)
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn model_predictions(state: &ModelState, idx: [usize; 3]) -> Result<(f64, f64, f64)> {
    let x = state.cp.reconstruct_entry(idx)?;
    let mean = state.family.cumulant_d1(x)?;
    Ok((x, mean, mnar_tensor::missingness::obs_prob(&state.theta, x)))
}

fn predict(a: &PredictArgs) -> Result<()> {
    let (state, _) = read_model(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let dims = state.dims();
    let entries: Vec<[usize; 3]> = match &a.entries {
        Some(p) => read_coo(p, dims, None)?.omega().to_vec(),
        None => (0..num_entries(dims)).map(|e| multi_index(dims, e)).collect(),
    };
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["i", "j", "k", "natural", "mean", "obs_prob"])?;
    for idx in entries {
        let (x, mean, p) = model_predictions(&state, idx)?;
        let [i, j, k] = idx;
        wtr.write_record([i.to_string(), j.to_string(), k.to_string(), x.to_string(), mean.to_string(), p.to_string()])?;
    }
    let bytes = wtr.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    emit(a.output.as_deref(), std::str::from_utf8(&bytes)?)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (state, _) = read_model(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let holdout = read_coo(&a.holdout, state.dims(), a.binarize_at)
        .with_context(|| format!("reading {}", a.holdout.display()))?;
    if holdout.num_observed() == 0 {
        bail!("holdout file has no entries");
    }
    let mut scores = Vec::with_capacity(holdout.num_observed());
    let mut means = Vec::with_capacity(holdout.num_observed());
    for (idx, _) in holdout.iter() {
        let (x, mean, _) = model_predictions(&state, idx)?;
        scores.push(x);
        means.push(mean);
    }
    let value = match a.metric {
        Metric::Auc => {
            let ys = holdout.y_obs();
            if ys.iter().any(|&y| y != 0.0 && y != 1.0) {
                bail!("AUC needs 0/1 responses; pass --binarize-at");
            }
            auc(&scores, &ys.iter().map(|&y| y == 1.0).collect::<Vec<_>>())?
        }
        Metric::Rmse => {
            let sq: f64 = means.iter().zip(holdout.y_obs()).map(|(m, y)| (m - y) * (m - y)).sum();
            (sq / means.len() as f64).sqrt()
        }
    };
    emit_json(a.output.as_deref(), &value)
}

fn test_cmd(a: &TestArgs) -> Result<()> {
    let (data, family) = a.data.load()?;
    let a2 = a.a2_size.resolve(data.dims());
    let result = test_mnar(&data, family, a.rank, &a.solver.options(), a2, a.alpha)?;
    emit_json(a.output.as_deref(), &json!({ "rank": a.rank, "rejects": result.rejects(), "result": result }))
}

fn select_cmd(a: &SelectArgs) -> Result<()> {
    let (data, family) = a.data.load()?;
    let sel = select_rank(&data, family, &a.candidates.0, &a.solver.options())?;
    if let Some(p) = &a.model {
        write_model(p, &sel.report.state, &sel.report.objective_trace)?;
    }
    emit_json(
        a.output.as_deref(),
        &json!({
            "rank": sel.rank,
            "bic": sel.bic.iter().map(|&(r, b)| json!({"rank": r, "bic": finite(b)})).collect::<Vec<_>>(),
            "converged": sel.report.converged,
        }),
    )
}

fn max_cross_inner(cols: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (r, a) in cols.iter().enumerate() {
        for b in &cols[r + 1..] {
            worst = worst.max(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().abs());
        }
    }
    worst
}

fn diagnose(a: &DiagnoseArgs) -> Result<()> {
    let (state, _) = read_model(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let x = state.cp.reconstruct_full();
    let diag = slice_diagnostics(&probability_tensor(&state.theta, &x)?)?;
    let mut out = json!({
        "family": state.family.kind,
        "dims": state.dims(),
        "rank": state.cp.rank(),
        "lambdas": state.cp.lambdas(),
        "theta": state.theta,
        "min_slice_obs_prob": diag.p_bar,
        "min_slice_obs_variance": diag.q_bar,
        "expected_observed_fraction": expected_observed_fraction(&state),
        "max_abs_natural": x.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())),
        "incoherence": [max_cross_inner(state.cp.u()), max_cross_inner(state.cp.v()), max_cross_inner(state.cp.w())],
    });
    if let Some(p) = &a.input {
        let data = read_coo(p, state.dims(), a.binarize_at).with_context(|| format!("reading {}", p.display()))?;
        let counts = Problem::new(&data).observed_per_slice();
        let dims = state.dims();
        out["observed"] = json!(data.num_observed());
        out["observed_fraction"] = json!(data.num_observed() as f64 / num_entries(dims) as f64);
        out["min_observed_per_slice"] = json!(counts.iter().map(|c| c.iter().min().copied()).collect::<Vec<_>>());
        out["empty_slices"] = json!(counts.iter().map(|c| c.iter().filter(|&&n| n == 0).count()).collect::<Vec<_>>());
        out["objective"] = json!(finite(objective(&state, &data)?));
    }
    emit_json(a.output.as_deref(), &out)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::TestMnar(a) => test_cmd(a),
        Command::SelectRank(a) => select_cmd(a),
        Command::Diagnose(a) => diagnose(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
