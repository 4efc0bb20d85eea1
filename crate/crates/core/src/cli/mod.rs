//! Command-line experiment suite: config schema, drivers and artifact
//! rendering.

pub mod config;
pub mod experiments;
pub mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::metrics::metrics_report;
pub use config::ExperimentConfig;
use experiments::{MatchRun, MethodMetrics, SeedSummary};
use output::{
    format_value, json_bytes, samples_csv, scatter_svg, sha256_hex, table_csv, OutputSet,
    PhaseTiming, RunManifest,
};

#[derive(Debug, Parser)]
#[command(
    name = "mmd-guidance",
    version,
    about = "MMD-guided diffusion experiments on Gaussian mixtures"
)]
pub struct Cli {
    /// JSON experiment config; each command has built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Record wall-clock time per phase in the manifest.
    #[arg(long, global = true)]
    pub timings: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Match a user sub-mixture with MMD guidance and the configured baselines.
    GmmMatch {
        /// Repeat over these seeds and report mean and standard deviation.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Match skewed reference proportions over user components.
    ModeReweight,
    /// Prompt-aware guidance with a product kernel.
    PromptMatch,
    /// Guided metrics as a function of the reference count.
    RefSweep {
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
    },
    /// FD/KD over a grid of RBF bandwidths and guidance scales.
    Ablation {
        #[arg(long, value_delimiter = ',')]
        sigmas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
    },
    /// Monte Carlo check of the pointwise concentration bound.
    ConcentrationCheck {
        /// Halve the Lipschitz constant in the bound.
        #[arg(long)]
        self_test: bool,
        /// Multiply the bound by this factor instead.
        #[arg(long, conflicts_with = "self_test")]
        bound_scale: Option<f64>,
        /// Monte Carlo trials per cell (at least 100).
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Print metrics between two sample CSV files as JSON.
    Metrics {
        file_a: PathBuf,
        file_b: PathBuf,
        #[arg(long, default_value_t = crate::metrics::DEFAULT_KNN_K)]
        k: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GmmMatch { .. } => "gmm-match",
            Command::ModeReweight => "mode-reweight",
            Command::PromptMatch => "prompt-match",
            Command::RefSweep { .. } => "ref-sweep",
            Command::Ablation { .. } => "ablation",
            Command::ConcentrationCheck { .. } => "concentration-check",
            Command::Metrics { .. } => "metrics",
        }
    }

    pub fn default_config(&self) -> ExperimentConfig {
        match self {
            Command::ModeReweight => ExperimentConfig::mode_reweight_default(),
            Command::PromptMatch => ExperimentConfig::prompt_match_default(),
            _ => ExperimentConfig::default(),
        }
    }
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// A self-check found a violation.
    CheckFailed,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::CheckFailed => 2,
        }
    }
}

/// Artifacts of one command before they are written.
#[derive(Debug)]
pub struct CommandOutput {
    pub files: OutputSet,
    pub outcome: Outcome,
    /// Text for standard output.
    pub stdout: String,
}

/// Config after applying the command-line overrides.
pub fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => cli.command.default_config(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.output_dir = dir.clone();
    }
    match &cli.command {
        Command::GmmMatch { seeds } if !seeds.is_empty() => cfg.seeds = seeds.clone(),
        Command::RefSweep { counts } if !counts.is_empty() => cfg.sweep.counts = counts.clone(),
        Command::Ablation { sigmas, lambdas } => {
            if !sigmas.is_empty() {
                cfg.ablation.kernels = sigmas.iter().map(|&s| KernelSpec::rbf(s)).collect();
            }
            if !lambdas.is_empty() {
                cfg.ablation.lambdas = lambdas.clone();
            }
        }
        Command::ConcentrationCheck {
            trials: Some(trials),
            ..
        } => cfg.concentration.trials = *trials,
        _ => {}
    }
    Ok(cfg)
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let canonical = ExperimentConfig {
        output_dir: PathBuf::new(),
        ..cfg.clone()
    };
    sha256_hex(canonical.to_json().as_bytes())
}

#[derive(Serialize)]
struct MethodEntry<'a> {
    name: &'a str,
    #[serde(flatten)]
    metrics: &'a MethodMetrics,
    histogram: &'a [f64],
}

#[derive(Serialize)]
struct MatchMetrics<'a> {
    seed: u64,
    reference_counts: &'a [usize],
    reference_weights: &'a [f64],
    methods: Vec<MethodEntry<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed_summary: Option<Vec<SeedSummary>>,
}

fn match_outputs(
    run: &MatchRun,
    summary: Option<Vec<SeedSummary>>,
    files: &mut OutputSet,
) -> Result<()> {
    files.add("references.csv", samples_csv(&run.references.batch)?);
    for m in &run.methods {
        files.add(format!("samples_{}.csv", m.name), samples_csv(&m.samples)?);
    }
    let metrics = MatchMetrics {
        seed: run.seed,
        reference_counts: &run.references.counts,
        reference_weights: &run.references.weights,
        methods: run
            .methods
            .iter()
            .map(|m| MethodEntry {
                name: &m.name,
                metrics: &m.metrics,
                histogram: &m.histogram,
            })
            .collect(),
        seed_summary: summary,
    };
    files.add("metrics.json", json_bytes(&metrics)?);
    let series: Vec<(&str, &crate::mmd::Batch)> = run
        .methods
        .iter()
        .map(|m| (m.name.as_str(), &m.samples))
        .collect();
    files.add(
        "scatter.svg",
        scatter_svg(&run.references.batch, &series).into_bytes(),
    );
    Ok(())
}

fn histogram_rows(run: &MatchRun) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for m in &run.methods {
        for (c, f) in m.histogram.iter().enumerate() {
            rows.push(vec![m.name.clone(), c.to_string(), format_value(*f)]);
        }
    }
    rows
}

fn cmd_gmm_match(cfg: &ExperimentConfig, files: &mut OutputSet) -> Result<Outcome> {
    if cfg.seeds.is_empty() {
        let run = experiments::run_match(cfg)?;
        match_outputs(&run, None, files)?;
    } else {
        let runs = cfg
            .seeds
            .iter()
            .map(|&s| experiments::run_match_at(cfg, s))
            .collect::<Result<Vec<_>>>()?;
        let summary = experiments::summarize_seeds(&runs);
        match_outputs(&runs[0], Some(summary), files)?;
    }
    Ok(Outcome::Success)
}

fn cmd_mode_reweight(cfg: &ExperimentConfig, files: &mut OutputSet) -> Result<Outcome> {
    let u = &cfg.user;
    if u.weights.is_none() && u.dirichlet_alpha.is_none() && u.counts.is_none() {
        return Err(Error::InvalidParameter(
            "mode-reweight needs user weights, counts or dirichlet_alpha".into(),
        ));
    }
    let run = experiments::run_match(cfg)?;
    match_outputs(&run, None, files)?;
    files.add(
        "histograms.csv",
        table_csv(&["method", "component", "fraction"], &histogram_rows(&run))?,
    );
    Ok(Outcome::Success)
}

fn cmd_prompt_match(cfg: &ExperimentConfig, files: &mut OutputSet) -> Result<Outcome> {
    let run = experiments::run_prompt_match(cfg)?;
    let mut refs = run.references.batch.clone();
    if let Ok(with) = crate::mmd::Batch::with_prompts(
        refs.data().clone(),
        ndarray::Array2::from_shape_fn((refs.len(), run.world.prompt_dim()), |(i, j)| {
            run.world.prompt_of_component[run.references.sources[i]][j]
        }),
    ) {
        refs = with;
    }
    files.add("references.csv", samples_csv(&refs)?);
    for (name, samples) in &run.methods {
        files.add(format!("samples_{name}.csv"), samples_csv(samples)?);
    }
    let rows: Vec<Vec<String>> = run
        .stats
        .iter()
        .map(|s| {
            vec![
                s.method.clone(),
                s.query.to_string(),
                run.queries[s.query]
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
                s.component.to_string(),
                s.count.to_string(),
                format_value(s.fraction),
                s.variance.map(format_value).unwrap_or_default(),
            ]
        })
        .collect();
    files.add(
        "prompt_stats.csv",
        table_csv(
            &[
                "method",
                "query",
                "prompt",
                "component",
                "count",
                "fraction",
                "variance",
            ],
            &rows,
        )?,
    );
    #[derive(Serialize)]
    struct PromptMetrics<'a> {
        seed: u64,
        queries: &'a [Vec<f64>],
        reference_variance: Option<f64>,
        stats: &'a [experiments::PromptStat],
    }
    files.add(
        "metrics.json",
        json_bytes(&PromptMetrics {
            seed: cfg.seed,
            queries: &run.queries,
            reference_variance: cfg.user.variance,
            stats: &run.stats,
        })?,
    );
    let series: Vec<(&str, &crate::mmd::Batch)> =
        run.methods.iter().map(|(n, b)| (n.as_str(), b)).collect();
    files.add(
        "scatter.svg",
        scatter_svg(&run.references.batch, &series).into_bytes(),
    );
    Ok(Outcome::Success)
}

fn cmd_ref_sweep(cfg: &ExperimentConfig, files: &mut OutputSet) -> Result<Outcome> {
    let rows = experiments::run_sweep(cfg)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let (a, f) = (&r.metrics.all, &r.metrics.first_two);
            vec![
                r.n_ref.to_string(),
                format_value(a.fd),
                format_value(a.kd),
                format_value(a.density),
                format_value(a.coverage),
                format_value(f.fd),
                format_value(f.kd),
            ]
        })
        .collect();
    files.add(
        "sweep.csv",
        table_csv(
            &[
                "n_ref",
                "fd",
                "kd",
                "density",
                "coverage",
                "fd_first_two",
                "kd_first_two",
            ],
            &table,
        )?,
    );
    files.add("metrics.json", json_bytes(&rows)?);
    Ok(Outcome::Success)
}

fn cmd_ablation(cfg: &ExperimentConfig, files: &mut OutputSet) -> Result<Outcome> {
    let rows = experiments::run_ablation(cfg)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.kernel.clone(),
                r.lambda.to_string(),
                format_value(r.fd),
                format_value(r.kd),
                format_value(r.fd_first_two),
                r.argmin.to_string(),
            ]
        })
        .collect();
    files.add(
        "ablation.csv",
        table_csv(
            &["kernel", "lambda", "fd", "kd", "fd_first_two", "argmin"],
            &table,
        )?,
    );
    files.add("metrics.json", json_bytes(&rows)?);
    Ok(Outcome::Success)
}

fn cmd_concentration(
    cfg: &ExperimentConfig,
    bound_scale: Option<f64>,
    files: &mut OutputSet,
) -> Result<Outcome> {
    let report = experiments::run_concentration(cfg, bound_scale)?;
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.sigma.to_string(),
                r.n_ref.to_string(),
                r.delta.to_string(),
                r.dim.to_string(),
                format_value(r.quantile),
                format_value(r.bound),
                r.pass.to_string(),
            ]
        })
        .collect();
    files.add(
        "concentration.csv",
        table_csv(
            &[
                "sigma", "n_ref", "delta", "dim", "quantile", "bound", "pass",
            ],
            &rows,
        )?,
    );
    let shrink: Vec<Vec<String>> = report
        .shrink
        .iter()
        .map(|s| {
            vec![
                s.sigma.to_string(),
                s.dim.to_string(),
                s.n_ref.to_string(),
                s.n_ref_next.to_string(),
                format_value(s.ratio),
            ]
        })
        .collect();
    files.add(
        "shrink.csv",
        table_csv(
            &["sigma", "dim", "n_ref", "n_ref_next", "median_ratio"],
            &shrink,
        )?,
    );
    Ok(if report.all_pass() {
        Outcome::Success
    } else {
        Outcome::CheckFailed
    })
}

fn cmd_metrics(file_a: &Path, file_b: &Path, k: usize) -> Result<String> {
    let a = output::read_samples_csv(file_a)?;
    let b = output::read_samples_csv(file_b)?;
    let report = metrics_report(&a, &b, k)?;
    Ok(String::from_utf8(json_bytes(&report)?).expect("utf-8"))
}

/// Runs `command` on `cfg` without touching the filesystem except for
/// reading inputs.
pub fn execute(command: &Command, cfg: &ExperimentConfig, timings: bool) -> Result<CommandOutput> {
    let mut files = OutputSet::default();
    if let Command::Metrics { file_a, file_b, k } = command {
        return Ok(CommandOutput {
            files,
            outcome: Outcome::Success,
            stdout: cmd_metrics(file_a, file_b, *k)?,
        });
    }
    let start = Instant::now();
    let outcome = match command {
        Command::GmmMatch { .. } => cmd_gmm_match(cfg, &mut files)?,
        Command::ModeReweight => cmd_mode_reweight(cfg, &mut files)?,
        Command::PromptMatch => cmd_prompt_match(cfg, &mut files)?,
        Command::RefSweep { .. } => cmd_ref_sweep(cfg, &mut files)?,
        Command::Ablation { .. } => cmd_ablation(cfg, &mut files)?,
        Command::ConcentrationCheck {
            self_test,
            bound_scale,
            ..
        } => {
            let scale = if *self_test { Some(0.5) } else { *bound_scale };
            cmd_concentration(cfg, scale, &mut files)?
        }
        Command::Metrics { .. } => unreachable!("handled above"),
    };
    let mut names = files.names();
    names.push("config.json".into());
    names.push("manifest.json".into());
    files.add("config.json", {
        let mut text = ExperimentConfig {
            output_dir: PathBuf::new(),
            ..cfg.clone()
        }
        .to_json();
        text.push('\n');
        text.into_bytes()
    });
    let manifest = RunManifest {
        command: command.name().to_string(),
        config_hash: config_hash(cfg),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        timings: timings.then(|| {
            vec![PhaseTiming {
                phase: "compute".into(),
                seconds: start.elapsed().as_secs_f64(),
            }]
        }),
        files: names,
    };
    files.add("manifest.json", json_bytes(&manifest)?);
    Ok(CommandOutput {
        files,
        outcome,
        stdout: String::new(),
    })
}

/// Runs a parsed command line and writes its artifacts.
pub fn run(cli: &Cli) -> Result<Outcome> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidParameter("--threads must be >= 1".into()));
        }
        // a pool configured earlier in the process is kept
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let cfg = effective_config(cli)?;
    let out = execute(&cli.command, &cfg, cli.timings)?;
    if !out.stdout.is_empty() {
        print!("{}", out.stdout);
    }
    if !matches!(cli.command, Command::Metrics { .. }) {
        out.files.write(&cfg.output_dir)?;
    }
    Ok(out.outcome)
}
