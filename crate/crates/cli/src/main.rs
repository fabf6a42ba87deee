use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use loramerge_core::graph::bound::{iteration_bound, site_levels};
use loramerge_core::harness::{
    ablation_sweep_problem, discrepancy_curve, heldout_score, synth_instance, AblationAxis, HeldoutScore, SynthSpec,
};
use loramerge_core::io::report::{ablation_csv, balance_csv, discrepancy_csv, iterations_csv, write_csv};
use loramerge_core::io::{
    adapters_to_bundle, base_to_bundle, merged_from_bundle, merged_to_bundle, samples_to_bundle, write_json, DType,
    OutputPaths, RunManifest, TensorBundle,
};
use loramerge_core::merging::{balance_table, site_lambdas, site_weights};
use loramerge_core::{merge, Error, ErrorKind, MergeConfig, Method, ModelGraph, Result, WeightMode, WeightScope};

#[derive(Parser)]
#[command(name = "loramerge", version, about = "Merge LoRA adapters trained on different tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge the adapters listed in a run manifest.
    Merge(MergeArgs),
    /// Print the iteration bound and site levels of a graph.
    Bound {
        #[arg(long)]
        graph: PathBuf,
    },
    /// Generate a synthetic problem and a manifest for it.
    Synth(SynthArgs),
    /// Diagnostics for a merged bundle: discrepancy, balance, held-out error.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Linear,
    Regmean,
    Iteris,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightsArg {
    Adaptive,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Delta,
    Full,
}

/// Overrides for the manifest's merge configuration.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "max-iter")]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, value_enum)]
    weights: Option<WeightsArg>,
    #[arg(long, value_enum)]
    scope: Option<ScopeArg>,
    #[arg(long = "regmean-offdiag")]
    regmean_offdiag: Option<f64>,
    /// Comma-separated coefficients for linear merging.
    #[arg(long = "linear-weights", value_delimiter = ',')]
    linear_weights: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn apply(&self, c: &mut MergeConfig) {
        if let Some(m) = self.method {
            c.method = match m {
                MethodArg::Linear => Method::Linear,
                MethodArg::Regmean => Method::Regmean,
                MethodArg::Iteris => Method::Iteris,
            };
        }
        if let Some(a) = self.alpha {
            c.alpha = a;
        }
        if let Some(k) = self.max_iter {
            c.max_iterations = k;
        }
        if let Some(t) = self.tol {
            c.convergence_tolerance = t;
        }
        if let Some(w) = self.weights {
            c.weight_mode = match w {
                WeightsArg::Adaptive => WeightMode::Adaptive,
                WeightsArg::Uniform => WeightMode::Uniform,
            };
        }
        if let Some(s) = self.scope {
            c.weight_scope = match s {
                ScopeArg::Delta => WeightScope::Delta,
                ScopeArg::Full => WeightScope::Full,
            };
        }
        if let Some(s) = self.regmean_offdiag {
            c.regmean_offdiagonal_scale = s;
        }
        if let Some(w) = &self.linear_weights {
            c.linear_weights = Some(w.clone());
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
    }
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Merged bundle path; overrides the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report path; overrides the manifest.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Store merged tensors as f32.
    #[arg(long)]
    f32: bool,
    /// Refactor merged deltas to this rank instead of storing them dense.
    #[arg(long)]
    rank: Option<usize>,
    /// Include wall-clock timings in the report.
    #[arg(long)]
    timings: bool,
    /// Also write a per-iteration CSV next to the report.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic problem description (JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    f32: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Merged bundle; defaults to the manifest's output path.
    #[arg(long)]
    merged: Option<PathBuf>,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Sweep one axis: max_iterations, alpha or adaptive.
    #[arg(long)]
    ablate: Option<String>,
    #[arg(long, value_delimiter = ',', requires = "ablate")]
    grid: Option<Vec<f64>>,
}

/// Prints a line; a closed stdout (e.g. piped into `head`) is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Io => 3,
        ErrorKind::Format => 4,
        ErrorKind::Shape => 5,
        ErrorKind::Singular => 6,
        ErrorKind::Degenerate | ErrorKind::Domain | ErrorKind::Data => 7,
        ErrorKind::Graph => 8,
    }
}

fn load_manifest(path: &Path, overrides: &ConfigArgs) -> Result<RunManifest> {
    let mut manifest = RunManifest::load(path)?;
    overrides.apply(&mut manifest.config);
    manifest.validate()?;
    Ok(manifest)
}

fn run_merge(args: &MergeArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest, &args.config)?;
    let run = manifest.load_run()?;
    let tasks = run.task_models()?;
    info!(
        "merging {} tasks over {} sites with {:?}",
        tasks.len(),
        run.graph.site_count(),
        manifest.config.method
    );
    let mut outcome = merge(&tasks, &run.base, &run.samples, &manifest.config)?;
    if !args.timings {
        outcome.report.timings = None;
    }
    let report = &outcome.report;
    if report.config.method == Method::Iteris && report.converged_at.is_none() {
        warn!(
            "no convergence within {} solves (tolerance {:e})",
            report.config.max_iterations, report.config.convergence_tolerance
        );
    }

    let merged_path = args.out.clone().unwrap_or_else(|| manifest.resolve(&manifest.output.merged));
    let report_path = args.report.clone().unwrap_or_else(|| manifest.resolve(&manifest.output.report));
    let mut bundle = merged_to_bundle(&outcome.merged, args.rank)?;
    if args.f32 {
        bundle.set_dtype(DType::F32);
    }
    bundle.write(&merged_path)?;
    write_json(&report_path, report)?;
    if args.csv {
        write_csv(&report_path.with_extension("iterations.csv"), &iterations_csv(report)?)?;
    }
    say!(
        "{} sites, {} solves, converged_at {:?}, bound {}, objective {:.6e}",
        report.sites.len(),
        report.iterations.len(),
        report.converged_at,
        report.iteration_bound,
        report.final_objective()
    );
    say!("wrote {} and {}", merged_path.display(), report_path.display());
    Ok(())
}

#[derive(Serialize)]
struct BoundOutput {
    iteration_bound: usize,
    sites: Vec<SiteLevel>,
}

#[derive(Serialize)]
struct SiteLevel {
    index: usize,
    label: String,
    level: usize,
}

fn run_bound(graph: &Path) -> Result<()> {
    let g = ModelGraph::load(graph)?;
    let levels = site_levels(&g);
    let out = BoundOutput {
        iteration_bound: iteration_bound(&g)?,
        sites: g
            .sites()
            .iter()
            .map(|s| SiteLevel {
                index: s.index,
                label: s.label.clone(),
                level: levels[s.index],
            })
            .collect(),
    };
    say!("{}", serde_json::to_string_pretty(&out).expect("serializes"));
    Ok(())
}

fn write_bundle(bundle: &mut TensorBundle, path: &Path, f32: bool) -> Result<()> {
    if f32 {
        bundle.set_dtype(DType::F32);
    }
    bundle.write(path)
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.spec).map_err(|e| Error::Io {
        path: args.spec.clone(),
        source: e,
    })?;
    let mut spec: SynthSpec = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: args.spec.clone(),
        source,
    })?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let inst = synth_instance(&spec)?;
    let dir = &args.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let graph = inst.graph();
    loramerge_core::io::write_atomic(&dir.join("graph.json"), format!("{}\n", graph.to_json()).as_bytes())?;
    write_bundle(&mut base_to_bundle(&inst.base), &dir.join("base.bundle"), args.f32)?;
    let positions = graph.positions();
    let mut adapters = Vec::new();
    let mut samples = Vec::new();
    let mut holdout = Vec::new();
    for n in 0..spec.tasks {
        let a = PathBuf::from(format!("task{n}.adapters.bundle"));
        let s = PathBuf::from(format!("task{n}.samples.bundle"));
        let h = PathBuf::from(format!("task{n}.holdout.bundle"));
        write_bundle(&mut adapters_to_bundle(&inst.adapters[n]), &dir.join(&a), args.f32)?;
        write_bundle(&mut samples_to_bundle(&inst.inputs[n], positions), &dir.join(&s), args.f32)?;
        write_bundle(&mut samples_to_bundle(&inst.holdout[n], positions), &dir.join(&h), args.f32)?;
        adapters.push(a);
        samples.push(s);
        holdout.push(h);
    }
    let mut manifest = RunManifest::new(
        "graph.json".into(),
        "base.bundle".into(),
        adapters,
        samples,
        MergeConfig {
            seed: spec.seed,
            ..MergeConfig::default()
        },
        OutputPaths {
            merged: "merged.bundle".into(),
            report: "report.json".into(),
        },
    );
    manifest.holdout = Some(holdout);
    write_json(&dir.join("manifest.json"), &manifest)?;
    say!(
        "wrote {} tasks over {} sites to {}",
        spec.tasks,
        graph.site_count(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct Analysis {
    sites: Vec<String>,
    /// `[task][site]`
    discrepancy: Vec<Vec<f64>>,
    /// `[site][task]`, from merge-time features.
    lambdas: Vec<Vec<f64>>,
    /// `[site][task]`; absent for a single task.
    balance_shares: Option<Vec<Vec<f64>>>,
    heldout: HeldoutScore,
    mean_alignment_error: f64,
}

fn run_analyze(args: &AnalyzeArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest, &args.config)?;
    let run = manifest.load_run()?;
    let problem = run.problem()?;
    let config = &manifest.config;
    let merged_path = args.merged.clone().unwrap_or_else(|| manifest.resolve(&manifest.output.merged));
    let merged = merged_from_bundle(&run.base, &TensorBundle::read(&merged_path)?, &merged_path)?;

    let curve = discrepancy_curve(&problem.tasks, &merged, &problem.inputs)?;
    let x = loramerge_core::graph::task_features(&problem.tasks, &problem.inputs)?;
    let weights = site_weights(&problem.tasks, config.weight_scope)?;
    let lambdas = site_lambdas(&weights, &x, config.weight_mode)?;
    let balance = balance_table(&weights, &x, &lambdas)?;
    let heldout = heldout_score(&problem.tasks, &merged, &problem.holdout, config.weight_scope)?;
    if run.holdout.is_none() {
        warn!("manifest lists no holdout bundles; scoring on merge-time samples");
    }

    let dir = &args.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let analysis = Analysis {
        sites: curve.sites.clone(),
        discrepancy: curve.values.clone(),
        lambdas,
        balance_shares: balance,
        mean_alignment_error: heldout.mean_alignment_error(),
        heldout,
    };
    write_json(&dir.join("analysis.json"), &analysis)?;
    write_csv(&dir.join("discrepancy.csv"), &discrepancy_csv(&curve)?)?;
    write_csv(
        &dir.join("balance.csv"),
        &balance_csv(&analysis.sites, analysis.balance_shares.as_deref())?,
    )?;
    say!(
        "mean held-out alignment error {:.6e} over {} tasks",
        analysis.mean_alignment_error,
        problem.tasks.len()
    );

    if let Some(axis) = &args.ablate {
        let axis: AblationAxis = axis.parse()?;
        let grid = args
            .grid
            .clone()
            .ok_or_else(|| Error::Config("--ablate needs --grid".into()))?;
        let table = ablation_sweep_problem(&problem, axis, &grid, config)?;
        write_json(&dir.join("ablation.json"), &table)?;
        write_csv(&dir.join("ablation.csv"), &ablation_csv(&table)?)?;
        for p in &table.points {
            match (&p.score, &p.error) {
                (Some(s), _) => say!("{:>12e}  {:.6e}", p.value, s.heldout.mean_alignment_error()),
                (None, Some(e)) => say!("{:>12e}  failed: {e}", p.value),
                (None, None) => {}
            }
        }
    }
    say!("wrote diagnostics to {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LORAMERGE_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Merge(a) => run_merge(a),
        Command::Bound { graph } => run_bound(graph),
        Command::Synth(a) => run_synth(a),
        Command::Analyze(a) => run_analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
