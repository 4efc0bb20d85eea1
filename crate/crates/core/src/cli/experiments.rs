//! Experiment drivers shared by the subcommands and the acceptance suite.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::config::{Baseline, EvalTarget, ExperimentConfig};
use super::output::read_samples_csv;
use crate::baselines::{
    cfg_guided_sample, cg_guided_sample, safe_learning_rate, train_linear_classifier,
};
use crate::concentration::{run_grid, GridReport};
use crate::diffusion::{
    guided_sample, in_batches, prompt_guided_sample, unguided_conditional_sample, unguided_sample,
    GuidanceConfig, NoiseSchedule, NoiseStreams, RunContext,
};
use crate::error::{Error, Result};
use crate::gmm::{dirichlet_weights, histogram, GmmSpec, PromptedGmm};
use crate::kernels::KernelSpec;
use crate::metrics::{MetricsReport, MetricsTarget};
use crate::mmd::{Batch, ReferenceSet};

const PURPOSE_REFERENCES: u64 = 101;
const PURPOSE_EVALUATION: u64 = 102;
const PURPOSE_DIRICHLET: u64 = 103;
const PURPOSE_NEGATIVES: u64 = 104;

/// Splits `total` by `weights` with largest-remainder rounding; ties go to
/// the lower index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// `total` split evenly over `parts`, remainder to the first entries.
pub fn even_split(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|p| total / parts + usize::from(p < total % parts))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct References {
    pub batch: Batch,
    /// Source component of each row; empty for file-backed references.
    pub sources: Vec<usize>,
    /// Proportions over the user components.
    pub weights: Vec<f64>,
    pub counts: Vec<usize>,
}

fn user_component(world: &GmmSpec, c: usize, variance: Option<f64>) -> Result<GmmSpec> {
    GmmSpec::new(
        vec![1.0],
        vec![world.means[c].clone()],
        vec![variance.unwrap_or(world.variances[c])],
    )
}

/// The user mixture: user components with the given proportions.
pub fn user_distribution(
    world: &GmmSpec,
    cfg: &ExperimentConfig,
    weights: &[f64],
) -> Result<GmmSpec> {
    let comps = &cfg.user.components;
    GmmSpec::new(
        weights.to_vec(),
        comps.iter().map(|&c| world.means[c].clone()).collect(),
        comps
            .iter()
            .map(|&c| cfg.user.variance.unwrap_or(world.variances[c]))
            .collect(),
    )
}

/// Draws `counts[p]` points from user component `p`. Each component has its
/// own stream, so a smaller count yields a prefix of a larger one.
pub fn references_with_counts(
    world: &GmmSpec,
    cfg: &ExperimentConfig,
    counts: &[usize],
    seed: u64,
) -> Result<References> {
    let streams = NoiseStreams::new(seed);
    let mut rows = Vec::new();
    let mut sources = Vec::new();
    for (&c, &n) in cfg.user.components.iter().zip(counts) {
        if n == 0 {
            continue;
        }
        let comp = user_component(world, c, cfg.user.variance)?;
        let mut rng = streams.rng(PURPOSE_REFERENCES, c as u64, 0);
        let b = comp.sample(n, &mut rng)?;
        for i in 0..n {
            rows.push(b.row(i).to_vec());
            sources.push(c);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total: usize = counts.iter().sum();
    Ok(References {
        batch: Batch::from_rows(&rows)?,
        sources,
        weights: counts.iter().map(|&n| n as f64 / total as f64).collect(),
        counts: counts.to_vec(),
    })
}

/// Reference set described by `cfg.user`, at `seed`.
pub fn build_references(world: &GmmSpec, cfg: &ExperimentConfig, seed: u64) -> Result<References> {
    let user = &cfg.user;
    if let Some(path) = &user.reference_file {
        let batch = read_samples_csv(path)?;
        if batch.dim() != world.dim() {
            return Err(Error::DimensionMismatch {
                expected: world.dim(),
                got: batch.dim(),
            });
        }
        let m = user.components.len();
        return Ok(References {
            counts: vec![0; m],
            weights: vec![1.0 / m as f64; m],
            sources: Vec::new(),
            batch,
        });
    }
    let m = user.components.len();
    let total = user.total.unwrap_or(user.samples_per_component * m);
    let counts = if let Some(c) = &user.counts {
        c.clone()
    } else if let Some(w) = &user.weights {
        largest_remainder(w, total)
    } else if let Some(alpha) = &user.dirichlet_alpha {
        let mut rng = NoiseStreams::new(seed).rng(PURPOSE_DIRICHLET, 0, 0);
        largest_remainder(&dirichlet_weights(alpha, &mut rng)?, total)
    } else if user.total.is_some() {
        even_split(total, m)
    } else {
        vec![user.samples_per_component; m]
    };
    references_with_counts(world, cfg, &counts, seed)
}

/// The batch generated samples are scored against.
pub fn evaluation_set(
    world: &GmmSpec,
    cfg: &ExperimentConfig,
    refs: &References,
    seed: u64,
) -> Result<Batch> {
    match cfg.evaluation.target {
        EvalTarget::References => Ok(refs.batch.clone()),
        EvalTarget::UserDistribution { samples } => {
            let weights = match &cfg.user.weights {
                Some(w) => w.clone(),
                None => refs.weights.clone(),
            };
            let dist = user_distribution(world, cfg, &weights)?;
            let mut rng = NoiseStreams::new(seed).rng(PURPOSE_EVALUATION, 0, 0);
            dist.sample(samples, &mut rng)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub all: MetricsReport,
    /// Metrics on the first two coordinates.
    pub first_two: MetricsReport,
}

/// Evaluation batch prepared for repeated scoring on all coordinates and on
/// the first two.
#[derive(Debug, Clone)]
pub struct EvalTargets {
    all: MetricsTarget,
    first_two: Option<MetricsTarget>,
}

impl EvalTargets {
    pub fn new(eval: &Batch, k: usize) -> Result<Self> {
        Ok(EvalTargets {
            all: MetricsTarget::new(eval.clone(), k)?,
            first_two: if eval.dim() > 2 {
                Some(MetricsTarget::new(eval.leading_coords(2), k)?)
            } else {
                None
            },
        })
    }

    pub fn score(&self, samples: &Batch) -> Result<MethodMetrics> {
        let all = self.all.report(samples)?;
        let first_two = match &self.first_two {
            Some(t) => t.report(&samples.leading_coords(2))?,
            None => all.clone(),
        };
        Ok(MethodMetrics { all, first_two })
    }
}

pub fn method_metrics(samples: &Batch, eval: &Batch, k: usize) -> Result<MethodMetrics> {
    EvalTargets::new(eval, k)?.score(samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub name: String,
    pub samples: Batch,
    /// Fraction of samples assigned to each world component.
    pub histogram: Vec<f64>,
    pub metrics: MethodMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchRun {
    pub seed: u64,
    pub world: GmmSpec,
    pub references: References,
    pub eval: Batch,
    pub methods: Vec<MethodRun>,
}

impl MatchRun {
    pub fn method(&self, name: &str) -> Option<&MethodRun> {
        self.methods.iter().find(|m| m.name == name)
    }
}

/// MMD-guided samples in batches of `cfg.batch_size`.
pub fn sample_guided(
    world: &GmmSpec,
    refs: &ReferenceSet,
    sched: &NoiseSchedule,
    guidance: &GuidanceConfig,
    n: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Batch> {
    let ctx = RunContext::new(sched, guidance.sampler, seed);
    in_batches(n, batch_size, |offset, size| {
        guided_sample(world, refs, size, &ctx.at_offset(offset), guidance)
    })
}

fn sample_baseline(
    baseline: Baseline,
    world: &GmmSpec,
    refs: &References,
    cfg: &ExperimentConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Batch> {
    let ctx = RunContext::new(sched, cfg.guidance.sampler, seed);
    let n = cfg.n_generate;
    match baseline {
        Baseline::None => unguided_sample(world, n, &ctx),
        Baseline::Cg => {
            let mut rng = NoiseStreams::new(seed).rng(PURPOSE_NEGATIVES, 0, 0);
            let neg = world.sample(refs.batch.len(), &mut rng)?;
            let lr = safe_learning_rate(&refs.batch, &neg);
            let clf =
                train_linear_classifier(&refs.batch, &neg, cfg.baseline_params.cg_train_steps, lr)?;
            cg_guided_sample(
                world,
                &clf.classifier,
                n,
                &ctx,
                cfg.baseline_params.cg_scale,
            )
        }
        Baseline::Cfg => cfg_guided_sample(
            world,
            &cfg.user.components,
            n,
            &ctx,
            cfg.baseline_params.cfg_weight,
        ),
    }
}

fn finish_method(
    name: &str,
    samples: Batch,
    world: &GmmSpec,
    targets: &EvalTargets,
) -> Result<MethodRun> {
    let labels = world.assign_components(&samples)?;
    Ok(MethodRun {
        name: name.to_string(),
        histogram: histogram(&labels, world.components()),
        metrics: targets.score(&samples)?,
        samples,
    })
}

/// MMD guidance plus the configured baselines at one seed.
pub fn run_match_at(cfg: &ExperimentConfig, seed: u64) -> Result<MatchRun> {
    cfg.validate()?;
    if !cfg.guidance.kernel.is_latent() {
        return Err(Error::UnsupportedKernel(cfg.guidance.kernel.name()));
    }
    let world = cfg.world.build()?;
    let sched = cfg.schedule.build()?;
    let references = build_references(&world, cfg, seed)?;
    let eval = evaluation_set(&world, cfg, &references, seed)?;
    let targets = EvalTargets::new(&eval, cfg.evaluation.knn_k)?;
    let q = ReferenceSet::new(references.batch.clone());
    let guided = sample_guided(
        &world,
        &q,
        &sched,
        &cfg.guidance,
        cfg.n_generate,
        cfg.batch_size,
        seed,
    )?;
    let mut methods = vec![finish_method("mmd", guided, &world, &targets)?];
    for &b in &cfg.baselines {
        if methods.iter().any(|m| m.name == b.method_name()) {
            continue;
        }
        let samples = sample_baseline(b, &world, &references, cfg, &sched, seed)?;
        methods.push(finish_method(b.method_name(), samples, &world, &targets)?);
    }
    Ok(MatchRun {
        seed,
        world,
        references,
        eval,
        methods,
    })
}

pub fn run_match(cfg: &ExperimentConfig) -> Result<MatchRun> {
    run_match_at(cfg, cfg.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub method: String,
    pub seeds: Vec<u64>,
    pub fd_mean: f64,
    pub fd_std: f64,
    pub kd_mean: f64,
    pub kd_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation of FD and KD per method over runs.
pub fn summarize_seeds(runs: &[MatchRun]) -> Vec<SeedSummary> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    first
        .methods
        .iter()
        .map(|m| {
            let fds: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.method(&m.name))
                .map(|x| x.metrics.all.fd)
                .collect();
            let kds: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.method(&m.name))
                .map(|x| x.metrics.all.kd)
                .collect();
            let (fd_mean, fd_std) = mean_std(&fds);
            let (kd_mean, kd_std) = mean_std(&kds);
            SeedSummary {
                method: m.name.clone(),
                seeds: runs.iter().map(|r| r.seed).collect(),
                fd_mean,
                fd_std,
                kd_mean,
                kd_std,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptStat {
    pub method: String,
    pub query: usize,
    pub component: usize,
    pub count: usize,
    pub fraction: f64,
    /// Mean per-coordinate sample variance of the samples assigned to the
    /// component; `None` below two samples.
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptRun {
    pub world: PromptedGmm,
    pub references: References,
    pub queries: Vec<Vec<f64>>,
    /// Row `i` is the prompt of sample `i`.
    pub prompts: Array2<f64>,
    pub methods: Vec<(String, Batch)>,
    pub stats: Vec<PromptStat>,
}

impl PromptRun {
    pub fn stat(&self, method: &str, query: usize, component: usize) -> Option<&PromptStat> {
        self.stats
            .iter()
            .find(|s| s.method == method && s.query == query && s.component == component)
    }
}

fn mean_coordinate_variance(batch: &Batch, rows: &[usize]) -> Option<f64> {
    if rows.len() < 2 {
        return None;
    }
    let n = rows.len() as f64;
    let d = batch.dim();
    let mut total = 0.0;
    for c in 0..d {
        let mean = rows.iter().map(|&i| batch.row(i)[c]).sum::<f64>() / n;
        total += rows
            .iter()
            .map(|&i| (batch.row(i)[c] - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
    }
    Some(total / d as f64)
}

fn prompt_stats(
    method: &str,
    samples: &Batch,
    world: &PromptedGmm,
    queries: usize,
    per: usize,
) -> Result<Vec<PromptStat>> {
    let labels = world.base.assign_components(samples)?;
    let mut out = Vec::new();
    for q in 0..queries {
        let span: Vec<usize> = (q * per..(q + 1) * per).collect();
        for c in 0..world.base.components() {
            let rows: Vec<usize> = span.iter().copied().filter(|&i| labels[i] == c).collect();
            if rows.is_empty() {
                continue;
            }
            out.push(PromptStat {
                method: method.to_string(),
                query: q,
                component: c,
                count: rows.len(),
                fraction: rows.len() as f64 / per as f64,
                variance: mean_coordinate_variance(samples, &rows),
            });
        }
    }
    Ok(out)
}

/// Prompt-aware guidance with a product kernel against the unguided
/// conditional sampler.
pub fn run_prompt_match(cfg: &ExperimentConfig) -> Result<PromptRun> {
    cfg.validate()?;
    if !matches!(cfg.guidance.kernel, KernelSpec::Product { .. }) {
        return Err(Error::UnsupportedKernel(format!(
            "prompt-match needs a product kernel, got {}",
            cfg.guidance.kernel.name()
        )));
    }
    let settings = cfg.prompts.clone().unwrap_or_default();
    if settings.queries_per_prompt == 0 {
        return Err(Error::InvalidParameter(
            "queries_per_prompt must be >= 1".into(),
        ));
    }
    let base = cfg.world.build()?;
    let world = settings.build(base)?;
    let sched = cfg.schedule.build()?;
    let seed = cfg.seed;
    let references = build_references(&world.base, cfg, seed)?;
    if references.sources.is_empty() {
        return Err(Error::InvalidParameter(
            "prompt-match needs generated references".into(),
        ));
    }
    let ref_prompts: Vec<f64> = references
        .sources
        .iter()
        .flat_map(|&c| world.prompt_of_component[c].clone())
        .collect();
    let pd = world.prompt_dim();
    let ref_batch = Batch::with_prompts(
        references.batch.data().clone(),
        Array2::from_shape_vec((references.batch.len(), pd), ref_prompts).expect("shape"),
    )?;
    let q = ReferenceSet::new(ref_batch);

    let queries = match &settings.queries {
        Some(qs) => qs.clone(),
        None => {
            let mut qs: Vec<Vec<f64>> = Vec::new();
            for &c in &cfg.user.components {
                let p = &world.prompt_of_component[c];
                if !qs.contains(p) {
                    qs.push(p.clone());
                }
            }
            qs
        }
    };
    if queries.is_empty() {
        return Err(Error::InvalidParameter("no query prompts".into()));
    }
    for p in &queries {
        if p.len() != pd {
            return Err(Error::DimensionMismatch {
                expected: pd,
                got: p.len(),
            });
        }
    }
    let per = settings.queries_per_prompt;
    let prompts = Array2::from_shape_fn((queries.len() * per, pd), |(i, j)| queries[i / per][j]);

    let ctx = RunContext::new(&sched, cfg.guidance.sampler, seed);
    let guided = in_batches(prompts.nrows(), cfg.batch_size, |offset, size| {
        let p = prompts.slice(s![offset..offset + size, ..]).to_owned();
        prompt_guided_sample(&world, &q, &p, &ctx.at_offset(offset), &cfg.guidance)
    })?;
    let unguided = unguided_conditional_sample(&world, &prompts, &ctx)?;
    let mut stats = prompt_stats("mmd", &guided, &world, queries.len(), per)?;
    stats.extend(prompt_stats(
        "unguided",
        &unguided,
        &world,
        queries.len(),
        per,
    )?);
    Ok(PromptRun {
        world,
        references,
        queries,
        prompts,
        methods: vec![("mmd".into(), guided), ("unguided".into(), unguided)],
        stats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_ref: usize,
    pub metrics: MethodMetrics,
}

/// Guided metrics per total reference count; references are nested across
/// counts and `n_ref = 0` is the unguided sampler.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let counts = &cfg.sweep.counts;
    if counts.is_empty() {
        return Err(Error::InvalidParameter(
            "sweep needs at least one count".into(),
        ));
    }
    if cfg.user.reference_file.is_some() {
        return Err(Error::InvalidParameter(
            "sweep draws its own references".into(),
        ));
    }
    let world = cfg.world.build()?;
    let sched = cfg.schedule.build()?;
    let m = cfg.user.components.len();
    let seed = cfg.seed;
    let largest = *counts.iter().max().expect("nonempty");
    let eval = match cfg.evaluation.target {
        EvalTarget::References => {
            references_with_counts(&world, cfg, &even_split(largest.max(1), m), seed)?.batch
        }
        EvalTarget::UserDistribution { samples } => {
            let dist = user_distribution(&world, cfg, &vec![1.0 / m as f64; m])?;
            let mut rng = NoiseStreams::new(seed).rng(PURPOSE_EVALUATION, 0, 0);
            dist.sample(samples, &mut rng)?
        }
    };
    let targets = EvalTargets::new(&eval, cfg.evaluation.knn_k)?;
    counts
        .iter()
        .map(|&n_ref| {
            let samples = if n_ref == 0 {
                unguided_sample(
                    &world,
                    cfg.n_generate,
                    &RunContext::new(&sched, cfg.guidance.sampler, seed),
                )?
            } else {
                let refs = references_with_counts(&world, cfg, &even_split(n_ref, m), seed)?;
                let q = ReferenceSet::new(refs.batch);
                sample_guided(
                    &world,
                    &q,
                    &sched,
                    &cfg.guidance,
                    cfg.n_generate,
                    cfg.batch_size,
                    seed,
                )?
            };
            Ok(SweepRow {
                n_ref,
                metrics: targets.score(&samples)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kernel: String,
    pub lambda: f64,
    pub fd: f64,
    pub kd: f64,
    pub fd_first_two: f64,
    /// Smallest FD for this kernel (first on ties).
    pub argmin: bool,
}

/// FD and KD over the kernel x guidance-scale grid; the configured lambda
/// schedule kind is kept and its base value replaced.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let grid = &cfg.ablation;
    if grid.kernels.is_empty() || grid.lambdas.is_empty() {
        return Err(Error::InvalidParameter(
            "ablation grids must be nonempty".into(),
        ));
    }
    let world = cfg.world.build()?;
    let sched = cfg.schedule.build()?;
    let refs = build_references(&world, cfg, cfg.seed)?;
    let eval = evaluation_set(&world, cfg, &refs, cfg.seed)?;
    let q = ReferenceSet::new(refs.batch.clone());
    let targets = EvalTargets::new(&eval, cfg.evaluation.knn_k)?;
    let mut rows = Vec::new();
    for kernel in &grid.kernels {
        if !kernel.is_latent() {
            return Err(Error::UnsupportedKernel(kernel.name()));
        }
        let start = rows.len();
        for &lambda in &grid.lambdas {
            let guidance = GuidanceConfig {
                lambda_schedule: cfg.guidance.lambda_schedule.with_base(lambda),
                kernel: kernel.clone(),
                ..cfg.guidance.clone()
            };
            guidance.validate()?;
            let samples = sample_guided(
                &world,
                &q,
                &sched,
                &guidance,
                cfg.n_generate,
                cfg.batch_size,
                cfg.seed,
            )?;
            let m = targets.score(&samples)?;
            rows.push(AblationRow {
                kernel: kernel.name(),
                lambda,
                fd: m.all.fd,
                kd: m.all.kd,
                fd_first_two: m.first_two.fd,
                argmin: false,
            });
        }
        let best = (start..rows.len())
            .min_by(|&a, &b| rows[a].fd.total_cmp(&rows[b].fd).then(a.cmp(&b)))
            .expect("nonempty");
        rows[best].argmin = true;
    }
    Ok(rows)
}

/// Pointwise concentration grid; `bound_scale` below 1 corrupts the bound.
pub fn run_concentration(cfg: &ExperimentConfig, bound_scale: Option<f64>) -> Result<GridReport> {
    let mut grid = cfg.concentration.clone();
    if let Some(scale) = bound_scale {
        grid.bound_scale = scale;
    }
    run_grid(&grid, cfg.seed)
}
