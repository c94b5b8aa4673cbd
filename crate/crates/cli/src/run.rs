//! The `generate`, `discover` and `report` commands.

use pdediscover::data::{
    add_noise, generate, lhs_points, read_dataset, sobol_points, subsample_sensors, write_csv, write_dataset,
    FieldDataset, GeneratorSpec, Mode, Model, Sampler,
};
use pdediscover::library::{CompiledLibrary, LibrarySpec};
use pdediscover::network::{
    init_params, init_root_branch, FieldNet, InputScaling, LayerSpec, MlpShape, Network, RootBranchShape,
};
use pdediscover::sparse_reg::SparseCoeffs;
use pdediscover::trainer::{ado_run, post_tune, pretrain, BranchData, CoeffHistory, LossParts, LossTrace, Problem, TrainError, TrainState};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{derive_seed, ExperimentConfig};
use crate::metrics::{compute_metrics, full_field_l2, CoefficientMetrics, Equation};
use crate::CliError;

pub const METRICS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelArg {
    Burgers,
    BurgersSource,
    Advection,
    Diffusion,
}

impl ModelArg {
    /// Default grid and domain of each model.
    pub fn spec(self, nu: f64, c: f64) -> GeneratorSpec {
        let two_pi = 2.0 * std::f64::consts::PI;
        let base = GeneratorSpec::burgers(nu);
        match self {
            ModelArg::Burgers => base,
            ModelArg::BurgersSource => GeneratorSpec {
                model: Model::BurgersSourceFd,
                x_range: (-two_pi, two_pi),
                ..base
            },
            ModelArg::Advection => GeneratorSpec {
                model: Model::AdvectionAnalytic,
                c,
                x_range: (0.0, two_pi),
                ..base
            },
            ModelArg::Diffusion => GeneratorSpec {
                model: Model::DiffusionAnalytic,
                modes: vec![Mode { k: 1.0, amplitude: 1.0 }, Mode { k: 2.0, amplitude: 0.5 }],
                x_range: (0.0, two_pi),
                ..base
            },
        }
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be a non-negative number, got {s}"))
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub model: ModelArg,
    /// Viscosity or diffusivity.
    #[arg(long, default_value_t = 0.1, value_parser = non_negative)]
    pub nu: f64,
    /// Advection speed.
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub sensors: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub times: u64,
    /// Noise standard deviation relative to the signal RMS.
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Spatial grid points of the truth field.
    #[arg(long)]
    pub nx: Option<usize>,
    /// Time steps of the truth field.
    #[arg(long)]
    pub nt: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Measurements of one generated dataset together with its full-grid truth.
pub fn generated_measurements(
    spec: &GeneratorSpec,
    sensors: usize,
    times: usize,
    noise: f64,
    sensor_seed: u64,
    noise_seed: u64,
) -> Result<(FieldDataset, FieldDataset), CliError> {
    let truth = generate(spec)?;
    let sparse = subsample_sensors(&truth, sensors, times, sensor_seed)?;
    Ok((truth, add_noise(&sparse, noise, noise_seed)))
}

/// Writes `truth.csv`, `measurements.csv` and `measurements.meta.json`.
pub fn cmd_generate(args: &GenerateArgs) -> Result<Vec<PathBuf>, CliError> {
    let mut spec = args.model.spec(args.nu, args.c);
    spec.nx = args.nx.unwrap_or(spec.nx);
    spec.nt = args.nt.unwrap_or(spec.nt);
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let (truth, meas) = generated_measurements(
        &spec,
        args.sensors as usize,
        args.times as usize,
        args.noise,
        args.seed,
        args.seed.wrapping_add(1),
    )?;
    create_dir(&args.out)?;
    let truth_path = args.out.join("truth.csv");
    let meas_path = args.out.join("measurements.csv");
    write_csv(&truth, &truth_path)?;
    write_dataset(&meas, &meas_path)?;
    Ok(vec![truth_path, meas_path.clone(), pdediscover::data::meta_path(&meas_path)])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Everything a discovery run reports.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryResult {
    pub equations: Vec<Equation>,
    pub support: Vec<Vec<bool>>,
    pub coefficients: Option<CoefficientMetrics>,
    pub full_field_l2_error: Option<f64>,
    pub final_loss: Option<LossParts>,
    pub alpha: f64,
    pub beta: f64,
    pub ado_iterations: usize,
    pub history: CoeffHistory,
    pub trace: LossTrace,
    pub warnings: Vec<String>,
    pub timing: Vec<StageTiming>,
    pub seed: u64,
    pub diverged: Option<String>,
}

impl DiscoveryResult {
    pub fn is_empty_model(&self) -> bool {
        self.equations.iter().all(|e| e.terms.is_empty())
    }
}

/// The equations of a coefficient set, nonzero terms in library order.
pub fn equations(spec: &LibrarySpec, coeffs: &[SparseCoeffs]) -> Vec<Equation> {
    let naming = spec.naming();
    let symbols = spec.symbols();
    coeffs
        .iter()
        .enumerate()
        .map(|(c, lam)| Equation {
            lhs: naming.time_derivative(c),
            terms: symbols
                .iter()
                .zip(&lam.values)
                .filter(|(_, v)| **v != 0.0)
                .map(|(s, v)| (s.clone(), *v))
                .collect(),
        })
        .collect()
}

fn format_coefficient(v: f64) -> String {
    // seven significant digits, in whichever notation is shorter
    let v: f64 = format!("{v:.6e}").parse().expect("formatted float");
    let (plain, sci) = (format!("{v}"), format!("{v:e}"));
    if plain.len() > sci.len() + 3 {
        sci
    } else {
        plain
    }
}

pub fn render_equations(eqs: &[Equation]) -> String {
    let mut out = String::new();
    for e in eqs {
        let mut line = format!("{} =", e.lhs);
        if e.terms.is_empty() {
            line.push_str(" 0");
        }
        for (i, (term, v)) in e.terms.iter().enumerate() {
            let sign = if *v < 0.0 { '-' } else { '+' };
            let mag = format_coefficient(v.abs());
            let body = if term == "1" { mag } else { format!("{mag}*{term}") };
            if i == 0 {
                let lead = if *v < 0.0 { "-" } else { "" };
                write!(line, " {lead}{body}").unwrap();
            } else {
                write!(line, " {sign} {body}").unwrap();
            }
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn truth_equations(cfg: &ExperimentConfig, spec: &LibrarySpec) -> Result<Option<Vec<Equation>>, CliError> {
    let Some(truth) = &cfg.truth else { return Ok(None) };
    let symbols = spec.symbols();
    let mut eqs = Vec::new();
    for (lhs, terms) in truth {
        for term in terms.keys() {
            if !symbols.contains(term) {
                return Err(CliError::Config(format!("truth.{lhs}: `{term}` is not a library term")));
            }
        }
        let ordered = symbols
            .iter()
            .filter_map(|s| terms.get(s).map(|v| (s.clone(), *v)))
            .collect();
        eqs.push(Equation {
            lhs: lhs.clone(),
            terms: ordered,
        });
    }
    Ok(Some(eqs))
}

struct Prepared {
    problem: Problem,
    net: Network,
    spec: LibrarySpec,
    truths: Vec<Option<FieldDataset>>,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let spec = cfg.library_spec()?;
    let library = CompiledLibrary::new(&spec).map_err(|e| CliError::Config(format!("library: {e}")))?;
    let mut branches = Vec::new();
    let mut truths = Vec::new();
    let mut bounds: Option<Vec<(f64, f64)>> = None;
    for (i, src) in cfg.datasets.iter().enumerate() {
        let i64_ = i as u64;
        let (meas, truth) = match (&src.path, &src.generate) {
            (Some(path), _) => {
                let truth = src.truth_path.as_deref().map(read_dataset).transpose()?;
                (read_dataset(path)?, truth)
            }
            (None, Some(g)) => {
                let (truth, meas) = generated_measurements(
                    &g.spec,
                    g.sensors,
                    g.times,
                    g.noise,
                    derive_seed(cfg.seed, "sensors", i64_),
                    derive_seed(cfg.seed, "noise", i64_),
                )?;
                (meas, Some(truth))
            }
            (None, None) => unreachable!("validated"),
        };
        if meas.points.dim() != spec.input_dim || meas.n_fields() != spec.output_dim {
            return Err(CliError::Config(format!(
                "datasets[{i}]: {} coordinates and {} fields do not match the library",
                meas.points.dim(),
                meas.n_fields()
            )));
        }
        let domain = match &cfg.collocation.bounds {
            Some(b) => b.iter().map(|[lo, hi]| (*lo, *hi)).collect(),
            None => meas.domain_bounds(),
        };
        if domain.len() != spec.input_dim {
            return Err(CliError::Config("collocation.bounds: wrong number of intervals".into()));
        }
        let col = match cfg.collocation.sampler {
            Sampler::Sobol => sobol_points(cfg.collocation.count, &domain, 1),
            Sampler::Lhs => lhs_points(cfg.collocation.count, &domain, derive_seed(cfg.seed, "collocation", i64_)),
        };
        bounds = Some(match bounds {
            None => domain.clone(),
            Some(b) => b.iter().zip(&domain).map(|(a, d)| (a.0.min(d.0), a.1.max(d.1))).collect(),
        });
        branches.push(BranchData::new(&meas, col.points));
        truths.push(truth);
    }
    let bounds = bounds.expect("at least one dataset");
    let nc = &cfg.network;
    let hidden = LayerSpec::stack(nc.depth, nc.width, nc.activation);
    let init_seed = derive_seed(cfg.seed, "init", 0);
    let mut net = if branches.len() == 1 {
        Network::Mlp(init_params(
            &MlpShape {
                input_dim: spec.input_dim,
                hidden,
                output_dim: spec.output_dim,
            },
            init_seed,
        )?)
    } else {
        Network::RootBranch(init_root_branch(
            &RootBranchShape {
                input_dim: spec.input_dim,
                root: hidden,
                branch: LayerSpec::stack(nc.branch_depth, nc.branch_width, nc.activation),
                branches: branches.len(),
                output_dim: spec.output_dim,
            },
            init_seed,
        )?)
    };
    let scaling = InputScaling::from_bounds(&bounds);
    match &mut net {
        Network::Mlp(n) => n.scaling = scaling,
        Network::RootBranch(n) => n.scaling = scaling,
    }
    let problem = Problem::new(branches, library, cfg.ado.split_ratio, derive_seed(cfg.seed, "split", 0))?;
    Ok(Prepared {
        problem,
        net,
        spec,
        truths,
    })
}

/// Runs pre-training, the alternating loop and post-tuning, then scores and
/// writes all artifacts. A diverged run still writes its artifacts before the
/// error is returned.
pub fn cmd_discover(cfg: &ExperimentConfig, out_dir: &Path) -> Result<DiscoveryResult, CliError> {
    cfg.validate()?;
    let Prepared {
        problem,
        mut net,
        spec,
        truths,
    } = prepare(cfg)?;
    let truth_eqs = truth_equations(cfg, &spec)?;
    let mut ado = cfg.ado.clone();
    ado.seed = derive_seed(cfg.seed, "ado", 0);
    create_dir(out_dir)?;

    let mut timing = Vec::new();
    let mut clock = |stage: &str, t0: Instant| {
        timing.push(StageTiming {
            stage: stage.into(),
            seconds: t0.elapsed().as_secs_f64(),
        })
    };
    let t0 = Instant::now();
    let outcome = (|| -> Result<TrainState, TrainError> {
        let t = Instant::now();
        let state = pretrain(&mut net, &problem, &ado)?;
        clock("pretrain", t);
        let t = Instant::now();
        let state = ado_run(&mut net, &problem, &ado, state)?;
        clock("ado", t);
        if state.is_empty_model() || ado.post_tune.is_empty() {
            return Ok(state);
        }
        let t = Instant::now();
        let state = post_tune(&mut net, &problem, &ado, state)?;
        clock("post-tune", t);
        Ok(state)
    })();
    timing.push(StageTiming {
        stage: "total".into(),
        seconds: t0.elapsed().as_secs_f64(),
    });

    let (state, diverged) = match outcome {
        Ok(s) => (s, None),
        Err(TrainError::Diverged { stage, epoch, state }) => {
            net.set_params(&state.params)?;
            let msg = format!("training diverged in {stage} at epoch {epoch}");
            (*state, Some((msg, stage, epoch)))
        }
        Err(e) => return Err(e.into()),
    };

    let eqs = equations(&spec, &state.coeffs);
    let coefficients = truth_eqs.as_ref().map(|t| compute_metrics(&eqs, t));
    let full_field = if diverged.is_none() && truths.iter().all(Option::is_some) {
        let pairs: Vec<(usize, &FieldDataset)> = truths.iter().enumerate().map(|(b, t)| (b, t.as_ref().unwrap())).collect();
        Some(full_field_l2(&net, &pairs)?)
    } else {
        None
    };
    let result = DiscoveryResult {
        support: state.support(),
        equations: eqs,
        coefficients,
        full_field_l2_error: full_field,
        final_loss: state.validation.last().map(|(_, l)| *l),
        alpha: state.alpha,
        beta: state.beta,
        ado_iterations: state.ado_iterations,
        history: state.history.clone(),
        trace: state.trace.clone(),
        warnings: state.warnings.clone(),
        timing,
        seed: cfg.seed,
        diverged: diverged.as_ref().map(|d| d.0.clone()),
    };
    write_outputs(out_dir, &result, &net, &state)?;
    if let Some((_, stage, epoch)) = diverged {
        return Err(TrainError::Diverged {
            stage,
            epoch,
            state: Box::new(state),
        }
        .into());
    }
    Ok(result)
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    schema_version: u32,
    seed: u64,
    equations: &'a [Equation],
    support_exact_match: Option<bool>,
    coefficient_error_percent: Option<ErrorSummary<'a>>,
    coefficient_error_reason: Option<String>,
    full_field_l2_error: Option<f64>,
    full_field_l2_reason: Option<&'static str>,
    final_validation_loss: Option<LossParts>,
    alpha: f64,
    beta: f64,
    ado_iterations: usize,
    empty_model: bool,
    diverged: Option<&'a str>,
    warnings: &'a [String],
}

#[derive(Serialize)]
struct ErrorSummary<'a> {
    mean: f64,
    std: Option<f64>,
    terms: &'a [crate::metrics::TermError],
}

fn metrics_json(r: &DiscoveryResult) -> String {
    let (exact, summary, reason) = match &r.coefficients {
        None => (None, None, Some("no reference equations configured".to_string())),
        Some(m) => (
            Some(m.support_exact_match),
            m.mean_percent.map(|mean| ErrorSummary {
                mean,
                std: m.std_percent,
                terms: &m.terms,
            }),
            m.reason.clone(),
        ),
    };
    let file = MetricsFile {
        schema_version: METRICS_VERSION,
        seed: r.seed,
        equations: &r.equations,
        support_exact_match: exact,
        coefficient_error_percent: summary,
        coefficient_error_reason: reason,
        full_field_l2_error: r.full_field_l2_error,
        full_field_l2_reason: r.full_field_l2_error.is_none().then_some("no full-grid truth for every dataset"),
        final_validation_loss: r.final_loss,
        alpha: r.alpha,
        beta: r.beta,
        ado_iterations: r.ado_iterations,
        empty_model: r.is_empty_model(),
        diverged: r.diverged.as_deref(),
        warnings: &r.warnings,
    };
    serde_json::to_string_pretty(&file).expect("metrics serialize") + "\n"
}

fn history_csv(h: &CoeffHistory, spec_lhs: &[String]) -> String {
    let mut out = String::from("stage,equation,term,value\n");
    for snap in &h.snapshots {
        for (sym, row) in h.symbols.iter().zip(&snap.matrix) {
            for (lhs, v) in spec_lhs.iter().zip(row) {
                writeln!(out, "{},{},{},{:e}", snap.stage, lhs, sym, v).unwrap();
            }
        }
    }
    out
}

fn trace_csv(t: &LossTrace) -> String {
    let mut out = String::from("epoch,stage,data,physics,total\n");
    for i in 0..t.len() {
        writeln!(out, "{i},{},{:e},{:e},{:e}", t.stage[i], t.data[i], t.physics[i], t.total[i]).unwrap();
    }
    out
}

fn write_outputs(dir: &Path, r: &DiscoveryResult, net: &Network, state: &TrainState) -> Result<(), CliError> {
    let lhs: Vec<String> = r.equations.iter().map(|e| e.lhs.clone()).collect();
    write_file(&dir.join("discovered_pde.txt"), &render_equations(&r.equations))?;
    write_file(&dir.join("coefficients_history.csv"), &history_csv(&r.history, &lhs))?;
    write_file(&dir.join("loss_trace.csv"), &trace_csv(&r.trace))?;
    write_file(&dir.join("metrics.json"), &metrics_json(r))?;
    let timing = serde_json::to_string_pretty(&r.timing).expect("timing serializes") + "\n";
    write_file(&dir.join("timing.json"), &timing)?;
    let network: serde_json::Value = serde_json::from_str(&net.to_checkpoint_json()).expect("checkpoint is JSON");
    let ckpt = serde_json::json!({
        "network": network,
        "symbols": r.history.symbols,
        "coefficients": state.coeffs,
        "alpha": state.alpha,
        "beta": state.beta,
    });
    write_file(&dir.join("checkpoint.json"), &(serde_json::to_string_pretty(&ckpt).expect("json") + "\n"))
}

/// Human-readable summary of a finished run directory.
pub fn cmd_report(dir: &Path) -> Result<String, CliError> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|source| CliError::Io { path: p, source })
    };
    let pde = read("discovered_pde.txt")?;
    let metrics: serde_json::Value =
        serde_json::from_str(&read("metrics.json")?).map_err(|e| CliError::Config(format!("metrics.json: {e}")))?;
    let mut out = String::new();
    writeln!(out, "discovered:").unwrap();
    for line in pde.lines() {
        writeln!(out, "  {line}").unwrap();
    }
    let field = |k: &str| metrics.get(k).cloned().unwrap_or(serde_json::Value::Null);
    match field("support_exact_match") {
        serde_json::Value::Bool(b) => writeln!(out, "support matches reference: {b}").unwrap(),
        _ => writeln!(out, "support matches reference: n/a").unwrap(),
    }
    let err = field("coefficient_error_percent");
    if let Some(mean) = err.get("mean").and_then(|v| v.as_f64()) {
        match err.get("std").and_then(|v| v.as_f64()) {
            Some(sd) => writeln!(out, "coefficient error: {mean:.2} ± {sd:.2} %").unwrap(),
            None => writeln!(out, "coefficient error: {mean:.2} %").unwrap(),
        }
    } else if let Some(reason) = field("coefficient_error_reason").as_str() {
        writeln!(out, "coefficient error: NA ({reason})").unwrap();
    }
    if let Some(l2) = field("full_field_l2_error").as_f64() {
        writeln!(out, "full-field l2 error: {:.2} %", 100.0 * l2).unwrap();
    }
    if let Some(w) = field("warnings").as_array() {
        for w in w.iter().filter_map(|v| v.as_str()) {
            writeln!(out, "warning: {w}").unwrap();
        }
    }
    if let Ok(t) = read("timing.json") {
        if let Ok(serde_json::Value::Array(stages)) = serde_json::from_str::<serde_json::Value>(&t) {
            for s in stages {
                if let (Some(name), Some(sec)) = (s["stage"].as_str(), s["seconds"].as_f64()) {
                    writeln!(out, "time {name}: {sec:.1} s").unwrap();
                }
            }
        }
    }
    Ok(out)
}
