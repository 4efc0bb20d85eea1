//! Noise schedules, DDPM/DDIM reverse steps and the MMD-guided sampling
//! loops.

use ndarray::{Array2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::gmm::{GmmSpec, PromptedGmm};
use crate::kernels::{sq_dist, KernelSpec};
use crate::mmd::{
    mmd2_biased, mmd2_grad, mmd2_product, mmd2_product_grad, prompt_kernel_matrix, Batch,
    ReferenceSet,
};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    abars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidParameter(
                "schedule needs at least one step".into(),
            ));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidParameter(
                "betas must lie strictly in (0, 1)".into(),
            ));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut abars = Vec::with_capacity(betas.len() + 1);
        abars.push(1.0);
        for a in &alphas {
            let prev = *abars.last().expect("nonempty");
            abars.push(prev * a);
        }
        let posterior_vars = (1..=betas.len())
            .map(|t| (1.0 - abars[t - 1]) / (1.0 - abars[t]) * betas[t - 1])
            .collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            abars,
            posterior_vars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= 1 && t <= self.steps() {
            Ok(())
        } else {
            Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            })
        }
    }

    fn check_level(&self, t: usize) -> Result<()> {
        if t <= self.steps() {
            Ok(())
        } else {
            Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            })
        }
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `abar_t` for `t` in `0..=T`, with `abar_0 = 1`.
    pub fn abar(&self, t: usize) -> f64 {
        self.abars[t]
    }

    /// Posterior variance `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

/// Linear betas from `beta_start` to `beta_end` inclusive.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidParameter(
            "schedule needs at least one step".into(),
        ));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = (steps - 1) as f64;
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// Linear schedule parameters. With `reference_steps = Some(r)` the betas are
/// multiplied by `r / steps`, so a short chain ends at roughly the terminal
/// noise level of an `r`-step chain with the nominal endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub reference_steps: Option<usize>,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            reference_steps: Some(1000),
        }
    }
}

impl ScheduleParams {
    /// Nominal endpoints with no rescaling.
    pub fn literal(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        ScheduleParams {
            steps,
            beta_start,
            beta_end,
            reference_steps: None,
        }
    }

    pub fn effective_betas(&self) -> (f64, f64) {
        match self.reference_steps {
            Some(r) if self.steps > 0 => {
                let scale = r as f64 / self.steps as f64;
                (self.beta_start * scale, self.beta_end * scale)
            }
            _ => (self.beta_start, self.beta_end),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        if self.reference_steps == Some(0) {
            return Err(Error::InvalidParameter(
                "reference_steps must be >= 1".into(),
            ));
        }
        let (start, end) = self.effective_betas();
        make_linear_schedule(self.steps, start, end)
    }
}

pub fn forward_noising(
    z0: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    eps: &[f64],
) -> Result<Vec<f64>> {
    sched.check_level(t)?;
    ensure_dim(z0.len(), eps.len())?;
    let abar = sched.abar(t);
    if abar == 1.0 {
        return Ok(z0.to_vec());
    }
    let a = abar.sqrt();
    let b = (1.0 - abar).sqrt();
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

pub fn ddpm_step(
    z_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
    eta_noise: &[f64],
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    ensure_dim(z_t.len(), eps_hat.len())?;
    ensure_dim(z_t.len(), eta_noise.len())?;
    let mut out = vec![0.0; z_t.len()];
    ddpm_into(z_t, t, eps_hat, sched, Some(eta_noise), &mut out);
    Ok(out)
}

fn ddpm_into(
    z_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
    noise: Option<&[f64]>,
    out: &mut [f64],
) {
    let alpha = sched.alpha(t);
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let c = (1.0 - alpha) / (1.0 - sched.abar(t)).sqrt();
    let sigma = sched.posterior_var(t).sqrt();
    for (i, o) in out.iter_mut().enumerate() {
        *o = inv_sqrt_alpha * (z_t[i] - c * eps_hat[i]);
    }
    if let Some(noise) = noise {
        if sigma > 0.0 {
            for (o, n) in out.iter_mut().zip(noise) {
                *o += sigma * n;
            }
        }
    }
}

pub fn ddim_step(
    z_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
    eta: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_eta(eta)?;
    ensure_dim(z_t.len(), eps_hat.len())?;
    ensure_dim(z_t.len(), noise.len())?;
    let mut out = vec![0.0; z_t.len()];
    ddim_into(z_t, t, eps_hat, sched, eta, Some(noise), &mut out);
    Ok(out)
}

fn check_eta(eta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&eta) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "DDIM eta must lie in [0, 1], got {eta}"
        )))
    }
}

fn ddim_into(
    z_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
    eta: f64,
    noise: Option<&[f64]>,
    out: &mut [f64],
) {
    let abar = sched.abar(t);
    let abar_prev = sched.abar(t - 1);
    let sigma = eta * sched.posterior_var(t).sqrt();
    let sqrt_abar = abar.sqrt();
    let sqrt_noise = (1.0 - abar).sqrt();
    let sqrt_prev = abar_prev.sqrt();
    let dir = (1.0 - abar_prev - sigma * sigma).max(0.0).sqrt();
    for (i, o) in out.iter_mut().enumerate() {
        let z0_hat = (z_t[i] - sqrt_noise * eps_hat[i]) / sqrt_abar;
        *o = sqrt_prev * z0_hat + dir * eps_hat[i];
    }
    if let Some(noise) = noise {
        if sigma > 0.0 {
            for (o, n) in out.iter_mut().zip(noise) {
                *o += sigma * n;
            }
        }
    }
}

/// Predicted clean sample `(z_t - sqrt(1 - abar) eps_hat) / sqrt(abar)`.
pub fn predict_z0(z_t: &[f64], eps_hat: &[f64], abar: f64) -> Vec<f64> {
    let a = abar.sqrt();
    let b = (1.0 - abar).sqrt();
    z_t.iter()
        .zip(eps_hat)
        .map(|(z, e)| (z - b * e) / a)
        .collect()
}

/// Classifier-free combination `(1 - w) eps_uncond + w eps_cond`.
pub fn cfg_eps(eps_uncond: &[f64], eps_cond: &[f64], w: f64) -> Vec<f64> {
    eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(u, c)| (1.0 - w) * u + w * c)
        .collect()
}

/// Noise prediction `eps(z_t, t)`.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;
    fn eps(&self, z: &[f64], t: usize, abar: f64) -> Result<Vec<f64>>;
}

/// Prompt-conditioned noise prediction.
pub trait ConditionalDenoiser: Sync {
    fn dim(&self) -> usize;
    fn eps_cond(&self, z: &[f64], t: usize, abar: f64, prompt: &[f64]) -> Result<Vec<f64>>;
}

impl Denoiser for GmmSpec {
    fn dim(&self) -> usize {
        GmmSpec::dim(self)
    }

    fn eps(&self, z: &[f64], _t: usize, abar: f64) -> Result<Vec<f64>> {
        self.eps_pred(z, abar)
    }
}

impl ConditionalDenoiser for PromptedGmm {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn eps_cond(&self, z: &[f64], _t: usize, abar: f64, prompt: &[f64]) -> Result<Vec<f64>> {
        let components = self.components_for(prompt);
        if components.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "prompt {prompt:?} matches no component"
            )));
        }
        self.base.conditional_eps_pred(z, abar, &components)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSchedule {
    Constant {
        lambda: f64,
    },
    /// `lambda_t = lambda0 * (1 - abar_t)`.
    SnrScaled {
        lambda0: f64,
    },
}

impl LambdaSchedule {
    pub fn at(&self, t: usize, sched: &NoiseSchedule) -> f64 {
        match *self {
            LambdaSchedule::Constant { lambda } => lambda,
            LambdaSchedule::SnrScaled { lambda0 } => lambda0 * (1.0 - sched.abar(t)),
        }
    }

    pub fn base(&self) -> f64 {
        match *self {
            LambdaSchedule::Constant { lambda } => lambda,
            LambdaSchedule::SnrScaled { lambda0 } => lambda0,
        }
    }

    pub fn with_base(&self, value: f64) -> LambdaSchedule {
        match self {
            LambdaSchedule::Constant { .. } => LambdaSchedule::Constant { lambda: value },
            LambdaSchedule::SnrScaled { .. } => LambdaSchedule::SnrScaled { lambda0: value },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    #[default]
    Clean,
    /// References pushed through the forward process with fresh noise at
    /// each timestep.
    NoisedAtT,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Ddpm,
    Ddim {
        eta: f64,
    },
}

/// Which state the guidance gradient is evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientAt {
    /// `z_t`, before the sampler step.
    #[default]
    PreStep,
    /// The sampler output for step `t`.
    PostStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeparateSteps {
    pub inner_steps: usize,
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lambda_schedule: LambdaSchedule,
    #[serde(default)]
    pub reference_mode: ReferenceMode,
    #[serde(default)]
    pub sampler: SamplerKind,
    #[serde(default)]
    pub separate_steps: Option<SeparateSteps>,
    pub kernel: KernelSpec,
    #[serde(default)]
    pub gradient_at: GradientAt,
}

impl GuidanceConfig {
    pub fn new(lambda: f64, kernel: KernelSpec) -> Self {
        GuidanceConfig {
            lambda_schedule: LambdaSchedule::Constant { lambda },
            reference_mode: ReferenceMode::Clean,
            sampler: SamplerKind::Ddpm,
            separate_steps: None,
            kernel,
            gradient_at: GradientAt::PreStep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let base = self.lambda_schedule.base();
        if !(base.is_finite() && base >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "guidance scale must be >= 0, got {base}"
            )));
        }
        if let SamplerKind::Ddim { eta } = self.sampler {
            check_eta(eta)?;
        }
        if let Some(s) = self.separate_steps {
            if s.inner_steps == 0 || s.every == 0 {
                return Err(Error::InvalidParameter(
                    "separate steps need inner_steps >= 1 and every >= 1".into(),
                ));
            }
        }
        self.kernel.validate()
    }
}

const PURPOSE_INIT: u64 = 1;
const PURPOSE_STEP: u64 = 2;
const PURPOSE_REFERENCE: u64 = 3;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Counter-based Gaussian noise: every `(purpose, index, t)` triple gets its
/// own stream, so draws do not depend on evaluation order or thread count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStreams {
    seed: u64,
}

impl NoiseStreams {
    pub fn new(seed: u64) -> Self {
        NoiseStreams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, purpose: u64, index: u64, t: u64) -> ChaCha8Rng {
        let mut h = splitmix64(self.seed);
        for word in [purpose, index, t] {
            h = splitmix64(h ^ word);
        }
        ChaCha8Rng::seed_from_u64(h)
    }

    pub fn normal(&self, purpose: u64, index: u64, t: u64, dim: usize) -> Vec<f64> {
        let mut rng = self.rng(purpose, index, t);
        (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

/// Per-timestep diagnostics of a guided run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: usize,
    /// Biased MMD^2 between the batch and the references, after the step.
    pub mmd2: f64,
    pub mean_grad_norm: f64,
    /// Mean distance from each sample to its nearest reference point.
    pub mean_ref_distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
}

/// Shared reverse-process settings for one batch.
#[derive(Debug, Clone, Copy)]
pub struct RunContext<'a> {
    pub sched: &'a NoiseSchedule,
    pub sampler: SamplerKind,
    pub streams: NoiseStreams,
    /// Global index of the first sample in this batch.
    pub offset: usize,
}

impl<'a> RunContext<'a> {
    pub fn new(sched: &'a NoiseSchedule, sampler: SamplerKind, seed: u64) -> Self {
        RunContext {
            sched,
            sampler,
            streams: NoiseStreams::new(seed),
            offset: 0,
        }
    }

    pub fn at_offset(self, offset: usize) -> Self {
        RunContext { offset, ..self }
    }
}

pub(crate) type EpsFn<'a> = dyn Fn(usize, &[f64], usize, f64) -> Result<Vec<f64>> + Sync + 'a;

/// Called after the sampler step at `t` with `z_t`, the per-row noise
/// predictions and the mutable step output.
pub(crate) type StepHook<'a> =
    dyn FnMut(usize, &Array2<f64>, &[Vec<f64>], &mut Array2<f64>) -> Result<()> + 'a;

/// Runs `t = T..1` from `z_T ~ N(0, I)` and returns `z_0`.
pub(crate) fn reverse_loop(
    ctx: &RunContext<'_>,
    n: usize,
    dim: usize,
    eps: &EpsFn<'_>,
    hook: &mut StepHook<'_>,
) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if let SamplerKind::Ddim { eta } = ctx.sampler {
        check_eta(eta)?;
    }
    let sched = ctx.sched;
    let steps = sched.steps();
    let mut z = Array2::<f64>::zeros((n, dim));
    z.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let draw = ctx
                .streams
                .normal(PURPOSE_INIT, (ctx.offset + i) as u64, steps as u64, dim);
            row.iter_mut().zip(draw).for_each(|(v, d)| *v = d);
        });

    for t in (1..=steps).rev() {
        let abar = sched.abar(t);
        let eps_rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let row = z.row(i);
                let e = eps(i, row.as_slice().expect("standard layout"), t, abar)?;
                ensure_dim(dim, e.len())?;
                Ok(e)
            })
            .collect::<Result<_>>()?;
        let mut next = Array2::<f64>::zeros((n, dim));
        next.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, mut out)| {
                let zi = z.row(i);
                let zi = zi.as_slice().expect("standard layout");
                let out = out.as_slice_mut().expect("standard layout");
                let noise = if t > 1 {
                    Some(
                        ctx.streams
                            .normal(PURPOSE_STEP, (ctx.offset + i) as u64, t as u64, dim),
                    )
                } else {
                    None
                };
                match ctx.sampler {
                    SamplerKind::Ddpm => {
                        ddpm_into(zi, t, &eps_rows[i], sched, noise.as_deref(), out)
                    }
                    SamplerKind::Ddim { eta } => {
                        ddim_into(zi, t, &eps_rows[i], sched, eta, noise.as_deref(), out)
                    }
                }
            });
        hook(t, &z, &eps_rows, &mut next)?;
        z = next;
    }
    Ok(z)
}

/// Unguided reverse process for `n` samples.
pub fn unguided_sample(denoiser: &dyn Denoiser, n: usize, ctx: &RunContext<'_>) -> Result<Batch> {
    let eps = |_: usize, z: &[f64], t: usize, abar: f64| denoiser.eps(z, t, abar);
    let z = reverse_loop(ctx, n, denoiser.dim(), &eps, &mut |_, _, _, _| Ok(()))?;
    Batch::new(z)
}

/// Unguided prompt-conditioned reverse process.
pub fn unguided_conditional_sample(
    denoiser: &dyn ConditionalDenoiser,
    prompts: &Array2<f64>,
    ctx: &RunContext<'_>,
) -> Result<Batch> {
    let eps = |i: usize, z: &[f64], t: usize, abar: f64| {
        denoiser.eps_cond(
            z,
            t,
            abar,
            prompts.row(i).as_slice().expect("standard layout"),
        )
    };
    let z = reverse_loop(
        ctx,
        prompts.nrows(),
        denoiser.dim(),
        &eps,
        &mut |_, _, _, _| Ok(()),
    )?;
    Batch::with_prompts(z, prompts.as_standard_layout().into_owned())
}

/// Where the guidance gradient points.
enum Target<'a> {
    Latent {
        refs: &'a ReferenceSet,
    },
    Product {
        refs: &'a ReferenceSet,
        prompts: &'a Array2<f64>,
        k_ref: Array2<f64>,
    },
}

struct Guide<'a> {
    target: Target<'a>,
    kernel: &'a KernelSpec,
    cfg: &'a GuidanceConfig,
    sched: &'a NoiseSchedule,
    streams: NoiseStreams,
    trace: Option<Trajectory>,
}

impl<'a> Guide<'a> {
    fn refs(&self) -> &ReferenceSet {
        match &self.target {
            Target::Latent { refs } | Target::Product { refs, .. } => refs,
        }
    }

    /// References matched to noise level `level`.
    fn refs_at(&self, level: usize) -> Result<Option<ReferenceSet>> {
        if self.cfg.reference_mode == ReferenceMode::Clean || level == 0 {
            return Ok(None);
        }
        let refs = self.refs().batch();
        let dim = refs.dim();
        let abar = self.sched.abar(level);
        let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
        let mut data = refs.data().clone();
        let noise = self
            .streams
            .normal(PURPOSE_REFERENCE, 0, level as u64, refs.len() * dim);
        data.iter_mut()
            .zip(noise)
            .for_each(|(v, e)| *v = a * *v + b * e);
        let batch = match refs.prompts() {
            Some(p) => Batch::with_prompts(data, p.clone())?,
            None => Batch::new(data)?,
        };
        Ok(Some(ReferenceSet::new(batch)))
    }

    fn batch_of(&self, z: &Array2<f64>) -> Result<Batch> {
        match &self.target {
            Target::Latent { .. } => Batch::new(z.clone()),
            Target::Product { prompts, .. } => Batch::with_prompts(z.clone(), (*prompts).clone()),
        }
    }

    fn gradient(&self, z: &Array2<f64>, level: usize) -> Result<Array2<f64>> {
        let noised = self.refs_at(level)?;
        let refs = noised.as_ref().unwrap_or_else(|| self.refs());
        let batch = self.batch_of(z)?;
        match &self.target {
            Target::Latent { .. } => mmd2_grad(&batch, refs, self.kernel),
            Target::Product { k_ref, .. } => mmd2_product_grad(&batch, refs, self.kernel, k_ref),
        }
    }

    /// `z <- z - lambda * grad(at)`, evaluated on `at` at noise `level`.
    /// Returns the mean gradient norm when a step was taken.
    fn apply(
        &self,
        t: usize,
        at: &Array2<f64>,
        level: usize,
        z: &mut Array2<f64>,
    ) -> Result<Option<f64>> {
        let lambda = self.cfg.lambda_schedule.at(t, self.sched);
        if lambda == 0.0 {
            return Ok(None);
        }
        let g = self.gradient(at, level)?;
        Zip::from(z.view_mut())
            .and(&g)
            .for_each(|v, gv| *v -= lambda * gv);
        let norm = g
            .axis_iter(Axis(0))
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / g.nrows() as f64;
        Ok(Some(norm))
    }

    fn record(&mut self, t: usize, z: &Array2<f64>, mean_grad_norm: f64) -> Result<()> {
        let batch = self.batch_of(z)?;
        let refs = self.refs();
        let mmd2 = match &self.target {
            Target::Latent { .. } => mmd2_biased(&batch, refs, self.kernel)?,
            Target::Product { .. } => mmd2_product(&batch, refs, self.kernel)?,
        };
        let mean_ref_distance = (0..batch.len())
            .map(|i| {
                (0..refs.len())
                    .map(|j| sq_dist(batch.row(i), refs.batch().row(j)))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum::<f64>()
            / batch.len() as f64;
        let trace = self.trace.as_mut().expect("tracing enabled");
        trace.snapshots.push(Snapshot {
            t,
            mmd2,
            mean_grad_norm,
            mean_ref_distance,
        });
        Ok(())
    }

    /// Guidance after the sampler step at `t`. Separate steps fire when the
    /// step count `T - t + 1` is a multiple of `every`.
    fn after_step(&mut self, t: usize, z_t: &Array2<f64>, next: &mut Array2<f64>) -> Result<()> {
        let norm = match self.cfg.separate_steps {
            Some(SeparateSteps { inner_steps, every }) => {
                let step_count = self.sched.steps() - t + 1;
                let mut last = None;
                if step_count.is_multiple_of(every) {
                    for _ in 0..inner_steps {
                        let at = next.clone();
                        last = self.apply(t, &at, t - 1, next)?;
                    }
                }
                last
            }
            None => match self.cfg.gradient_at {
                GradientAt::PreStep => self.apply(t, z_t, t, next)?,
                GradientAt::PostStep => {
                    let at = next.clone();
                    self.apply(t, &at, t - 1, next)?
                }
            },
        };
        if self.trace.is_some() {
            self.record(t, next, norm.unwrap_or(0.0))?;
        }
        Ok(())
    }
}

fn check_guidance(q: &ReferenceSet, dim: usize, cfg: &GuidanceConfig) -> Result<()> {
    cfg.validate()?;
    if q.is_empty() {
        return Err(Error::EmptyBatch);
    }
    ensure_dim(dim, q.dim())
}

/// MMD-guided sampling of `n` samples:
/// `z_{t-1} = step(z_t) - lambda_t * grad MMD^2`. The sampler named in
/// `cfg` replaces the one in `ctx`.
pub fn guided_sample(
    denoiser: &dyn Denoiser,
    q: &ReferenceSet,
    n: usize,
    ctx: &RunContext<'_>,
    cfg: &GuidanceConfig,
) -> Result<Batch> {
    Ok(guided_sample_traced(denoiser, q, n, ctx, cfg, false)?.0)
}

/// [`guided_sample`] with optional per-step diagnostics.
pub fn guided_sample_traced(
    denoiser: &dyn Denoiser,
    q: &ReferenceSet,
    n: usize,
    ctx: &RunContext<'_>,
    cfg: &GuidanceConfig,
    trace: bool,
) -> Result<(Batch, Trajectory)> {
    check_guidance(q, denoiser.dim(), cfg)?;
    if !cfg.kernel.is_latent() {
        return Err(Error::UnsupportedKernel(cfg.kernel.name()));
    }
    let ctx = RunContext {
        sampler: cfg.sampler,
        ..*ctx
    };
    let mut guide = Guide {
        target: Target::Latent { refs: q },
        kernel: &cfg.kernel,
        cfg,
        sched: ctx.sched,
        streams: ctx.streams,
        trace: trace.then(Trajectory::default),
    };
    let eps = |_: usize, z: &[f64], t: usize, abar: f64| denoiser.eps(z, t, abar);
    let z = reverse_loop(&ctx, n, denoiser.dim(), &eps, &mut |t, z_t, _, next| {
        guide.after_step(t, z_t, next)
    })?;
    Ok((Batch::new(z)?, guide.trace.unwrap_or_default()))
}

/// Guidance applied as `inner_steps` gradient updates after every `every`-th
/// sampler step; `inner_steps = 0` is the unguided sampler.
pub fn guided_sample_separate(
    denoiser: &dyn Denoiser,
    q: &ReferenceSet,
    n: usize,
    ctx: &RunContext<'_>,
    cfg: &GuidanceConfig,
    inner_steps: usize,
    every: usize,
) -> Result<Batch> {
    if every == 0 {
        return Err(Error::InvalidParameter("every must be >= 1".into()));
    }
    if inner_steps == 0 {
        let ctx = RunContext {
            sampler: cfg.sampler,
            ..*ctx
        };
        return unguided_sample(denoiser, n, &ctx);
    }
    let cfg = GuidanceConfig {
        separate_steps: Some(SeparateSteps { inner_steps, every }),
        ..cfg.clone()
    };
    guided_sample(denoiser, q, n, ctx, &cfg)
}

/// Prompt-aware guidance with a product kernel; row `i` of `prompts` is the
/// prompt of sample `i`.
pub fn prompt_guided_sample(
    denoiser: &dyn ConditionalDenoiser,
    q: &ReferenceSet,
    prompts: &Array2<f64>,
    ctx: &RunContext<'_>,
    cfg: &GuidanceConfig,
) -> Result<Batch> {
    Ok(prompt_guided_sample_traced(denoiser, q, prompts, ctx, cfg, false)?.0)
}

pub fn prompt_guided_sample_traced(
    denoiser: &dyn ConditionalDenoiser,
    q: &ReferenceSet,
    prompts: &Array2<f64>,
    ctx: &RunContext<'_>,
    cfg: &GuidanceConfig,
    trace: bool,
) -> Result<(Batch, Trajectory)> {
    check_guidance(q, denoiser.dim(), cfg)?;
    if !matches!(cfg.kernel, KernelSpec::Product { .. }) {
        return Err(Error::UnsupportedKernel(cfg.kernel.name()));
    }
    if q.batch().prompts().is_none() {
        return Err(Error::MissingPrompts);
    }
    let n = prompts.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let prompts = prompts.as_standard_layout().into_owned();
    let probe = Batch::with_prompts(Array2::zeros((n, denoiser.dim())), prompts.clone())?;
    let k_ref = prompt_kernel_matrix(&probe, q, &cfg.kernel)?;
    let ctx = RunContext {
        sampler: cfg.sampler,
        ..*ctx
    };
    let mut guide = Guide {
        target: Target::Product {
            refs: q,
            prompts: &prompts,
            k_ref,
        },
        kernel: &cfg.kernel,
        cfg,
        sched: ctx.sched,
        streams: ctx.streams,
        trace: trace.then(Trajectory::default),
    };
    let eps = |i: usize, z: &[f64], t: usize, abar: f64| {
        denoiser.eps_cond(
            z,
            t,
            abar,
            prompts.row(i).as_slice().expect("standard layout"),
        )
    };
    let z = reverse_loop(&ctx, n, denoiser.dim(), &eps, &mut |t, z_t, _, next| {
        guide.after_step(t, z_t, next)
    })?;
    let trace = guide.trace.take().unwrap_or_default();
    Ok((Batch::with_prompts(z, prompts)?, trace))
}

/// Generates `n` samples in consecutive batches of at most `batch_size`,
/// passing each batch's global offset and size to `run`.
pub fn in_batches(
    n: usize,
    batch_size: usize,
    mut run: impl FnMut(usize, usize) -> Result<Batch>,
) -> Result<Batch> {
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be >= 1".into()));
    }
    let mut out: Option<Batch> = None;
    let mut offset = 0;
    while offset < n {
        let size = batch_size.min(n - offset);
        let part = run(offset, size)?;
        out = Some(match out {
            None => part,
            Some(acc) => acc.concat(&part)?,
        });
        offset += size;
    }
    Ok(out.expect("n >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn sched200() -> NoiseSchedule {
        make_linear_schedule(200, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn linear_schedule() {
        let one = make_linear_schedule(1, 0.3, 0.5).unwrap();
        assert_eq!(one.betas(), &[0.3]);
        let long = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let direct: f64 = (0..1000)
            .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0))
            .product();
        assert_relative_eq!(long.abar(1000), direct, max_relative = 1e-10);
        assert!(
            (long.abar(1000) - 4.0e-5).abs() < 0.1e-5,
            "{}",
            long.abar(1000)
        );
        assert_eq!(long.beta(1), 1e-4);
        assert_relative_eq!(long.beta(1000), 0.02, max_relative = 1e-14);
        for t in 1..=1000 {
            assert!(long.abar(t) < long.abar(t - 1));
        }
        assert_eq!(long.abar(0), 1.0);
        assert_eq!(long.posterior_var(1), 0.0);
        assert!(make_linear_schedule(10, 0.0, 0.1).is_err());
        assert!(make_linear_schedule(10, 0.2, 0.1).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn schedule_params_rescale() {
        let p = ScheduleParams::default();
        let (start, end) = p.effective_betas();
        assert_relative_eq!(start, 5e-4, max_relative = 1e-12);
        assert_relative_eq!(end, 0.1, max_relative = 1e-12);
        let rescaled = p.build().unwrap();
        let literal = ScheduleParams::literal(200, 1e-4, 0.02).build().unwrap();
        assert_eq!(literal, sched200());
        assert!(literal.abar(200) > 0.1);
        assert!(rescaled.abar(200) < 1e-4);
        let same = ScheduleParams {
            steps: 1000,
            ..ScheduleParams::default()
        };
        assert_eq!(
            same.build().unwrap(),
            make_linear_schedule(1000, 1e-4, 0.02).unwrap()
        );
        let bad = ScheduleParams {
            reference_steps: Some(0),
            ..ScheduleParams::default()
        };
        assert!(bad.build().is_err());
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<ScheduleParams>(&json).unwrap(), p);
        let bare: ScheduleParams =
            serde_json::from_str(r#"{"steps":200,"beta_start":0.0001,"beta_end":0.02}"#).unwrap();
        assert_eq!(bare.reference_steps, None);
    }

    #[test]
    fn forward_noising_examples() {
        let s = sched200();
        let z0 = [1.5, -2.0, 0.25];
        let eps = [0.3, 0.1, -0.7];
        assert_eq!(forward_noising(&z0, 0, &s, &eps).unwrap(), z0.to_vec());
        let zt = forward_noising(&z0, 50, &s, &[0.0; 3]).unwrap();
        for c in 0..3 {
            assert_eq!(zt[c], s.abar(50).sqrt() * z0[c]);
        }
        for t in [1, 17, 200] {
            let zt = forward_noising(&z0, t, &s, &eps).unwrap();
            let abar = s.abar(t);
            for c in 0..3 {
                let back = (zt[c] - (1.0 - abar).sqrt() * eps[c]) / abar.sqrt();
                assert_relative_eq!(back, z0[c], max_relative = 1e-12);
            }
        }
        assert!(forward_noising(&z0, 201, &s, &eps).is_err());
    }

    #[test]
    fn ddpm_step_examples() {
        let s = sched200();
        let z = [0.4, -1.1];
        let out = ddpm_step(&z, 10, &[0.0, 0.0], &s, &[0.0, 0.0]).unwrap();
        for c in 0..2 {
            assert_relative_eq!(out[c], z[c] / s.alpha(10).sqrt(), max_relative = 1e-15);
        }
        let one = make_linear_schedule(1, 0.05, 0.05).unwrap();
        let z0 = [0.8, -0.3];
        let eps = [1.2, 0.4];
        let z1 = forward_noising(&z0, 1, &one, &eps).unwrap();
        let back = ddpm_step(&z1, 1, &eps, &one, &[5.0, 5.0]).unwrap();
        for c in 0..2 {
            assert_relative_eq!(back[c], z0[c], max_relative = 1e-12);
        }
        assert!(ddpm_step(&z, 0, &z, &s, &z).is_err());
        assert!(ddpm_step(&z, 201, &z, &s, &z).is_err());
    }

    #[test]
    fn ddim_step_examples() {
        let s = sched200();
        let z0 = [0.8, -0.3, 2.0];
        let eps = [1.2, 0.4, -0.9];
        for t in [1, 50, 200] {
            let zt = forward_noising(&z0, t, &s, &eps).unwrap();
            let z0_hat = predict_z0(&zt, &eps, s.abar(t));
            for c in 0..3 {
                assert_relative_eq!(z0_hat[c], z0[c], max_relative = 1e-12);
            }
            let prev = ddim_step(&zt, t, &eps, &s, 0.0, &[0.0; 3]).unwrap();
            let expected = forward_noising(&z0, t - 1, &s, &eps).unwrap();
            for c in 0..3 {
                assert_relative_eq!(prev[c], expected[c], max_relative = 1e-10);
            }
        }
        let z = [0.4, -1.1, 0.7];
        let out = ddim_step(&z, 30, &[0.0; 3], &s, 0.0, &[0.0; 3]).unwrap();
        let ratio = (s.abar(29) / s.abar(30)).sqrt();
        for c in 0..3 {
            assert_relative_eq!(out[c], ratio * z[c], max_relative = 1e-14);
        }
        assert!(ddim_step(&z, 30, &z, &s, 1.5, &z).is_err());
    }

    #[test]
    fn ddim_eta_one_matches_ddpm_marginals() {
        let s = sched200();
        let streams = NoiseStreams::new(4);
        let t = 120;
        let z = [0.9, -0.4];
        let eps = [0.3, 0.8];
        let n = 10_000;
        let (mut a, mut b): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
        for i in 0..n {
            let noise = streams.normal(9, i, 0, 2);
            a.push(ddpm_step(&z, t, &eps, &s, &noise).unwrap()[0]);
            let noise = streams.normal(10, i, 0, 2);
            b.push(ddim_step(&z, t, &eps, &s, 1.0, &noise).unwrap()[0]);
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (m, var)
        };
        let (ma, va) = stats(&a);
        let (mb, vb) = stats(&b);
        let se_mean = ((va + vb) / n as f64).sqrt();
        assert!((ma - mb).abs() < 3.0 * se_mean, "{ma} vs {mb}");
        let se_var = (2.0 * (va * va + vb * vb) / (n - 1) as f64).sqrt();
        assert!((va - vb).abs() < 3.0 * se_var, "{va} vs {vb}");
    }

    #[test]
    fn cfg_examples() {
        assert_eq!(cfg_eps(&[1.0, 0.0], &[0.0, 1.0], 2.0), vec![-1.0, 2.0]);
        assert_eq!(cfg_eps(&[0.3, 0.7], &[1.5, -2.0], 1.0), vec![1.5, -2.0]);
        assert_eq!(cfg_eps(&[0.3, 0.7], &[1.5, -2.0], 0.0), vec![0.3, 0.7]);
    }

    #[test]
    fn noise_streams_are_keyed() {
        let s = NoiseStreams::new(11);
        assert_eq!(s.normal(1, 2, 3, 4), s.normal(1, 2, 3, 4));
        assert_ne!(s.normal(1, 2, 3, 4), s.normal(1, 2, 4, 4));
        assert_ne!(s.normal(1, 2, 3, 4), s.normal(1, 3, 3, 4));
        assert_ne!(
            s.normal(1, 2, 3, 4),
            NoiseStreams::new(12).normal(1, 2, 3, 4)
        );
        let mut rng = s.rng(5, 0, 0);
        let _: f64 = rng.random();
    }

    fn ring2() -> GmmSpec {
        GmmSpec::ring(8, 10.0, 2).unwrap()
    }

    #[test]
    fn zero_guidance_is_bitwise_unguided() {
        let world = ring2();
        let s = make_linear_schedule(40, 1e-4, 0.02).unwrap();
        let ctx = RunContext::new(&s, SamplerKind::Ddpm, 3).at_offset(5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let refs = ReferenceSet::new(world.sample(20, &mut rng).unwrap());
        let plain = unguided_sample(&world, 16, &ctx).unwrap();
        for lambda in [
            LambdaSchedule::Constant { lambda: 0.0 },
            LambdaSchedule::SnrScaled { lambda0: 0.0 },
        ] {
            let mut cfg = GuidanceConfig::new(0.0, KernelSpec::rbf(1.0));
            cfg.lambda_schedule = lambda;
            cfg.reference_mode = ReferenceMode::NoisedAtT;
            assert_eq!(guided_sample(&world, &refs, 16, &ctx, &cfg).unwrap(), plain);
        }
        let cfg = GuidanceConfig::new(0.3, KernelSpec::rbf(1.0));
        assert_eq!(
            guided_sample_separate(&world, &refs, 16, &ctx, &cfg, 0, 3).unwrap(),
            plain
        );
    }

    #[test]
    fn separate_single_step_equals_post_step_simultaneous() {
        let world = ring2();
        let s = make_linear_schedule(30, 1e-4, 0.02).unwrap();
        let ctx = RunContext::new(&s, SamplerKind::Ddpm, 8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let refs = ReferenceSet::new(world.sample(12, &mut rng).unwrap());
        for mode in [ReferenceMode::Clean, ReferenceMode::NoisedAtT] {
            let mut cfg = GuidanceConfig::new(0.5, KernelSpec::rbf(1.0));
            cfg.reference_mode = mode;
            cfg.gradient_at = GradientAt::PostStep;
            let simultaneous = guided_sample(&world, &refs, 10, &ctx, &cfg).unwrap();
            let separate = guided_sample_separate(&world, &refs, 10, &ctx, &cfg, 1, 1).unwrap();
            assert_eq!(simultaneous, separate);
        }
    }

    #[test]
    fn single_reference_attraction() {
        let world = GmmSpec::new(vec![1.0], vec![vec![0.0, 0.0]], vec![1.0]).unwrap();
        let s = sched200();
        let target = vec![2.0, -1.5];
        let refs = ReferenceSet::new(Batch::from_rows(&[target.clone()]).unwrap());
        let sigma = 1.0;
        let cfg = GuidanceConfig::new(0.5, KernelSpec::rbf(sigma));
        for seed in 0..5 {
            let ctx = RunContext::new(&s, SamplerKind::Ddpm, seed);
            let (out, trace) = guided_sample_traced(&world, &refs, 1, &ctx, &cfg, true).unwrap();
            let d = sq_dist(out.row(0), &target).sqrt();
            assert!(d < 2.0 * sigma, "seed {seed}: terminal distance {d}");
            assert_eq!(trace.snapshots.len(), 200);
            assert!(trace.snapshots.windows(2).all(|w| w[0].t > w[1].t));
        }
    }

    #[test]
    fn determinism_across_thread_counts() {
        let world = ring2();
        let s = make_linear_schedule(30, 1e-4, 0.02).unwrap();
        let ctx = RunContext::new(&s, SamplerKind::Ddim { eta: 0.5 }, 5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let refs = ReferenceSet::new(world.sample(25, &mut rng).unwrap());
        let mut cfg = GuidanceConfig::new(0.2, KernelSpec::rbf(1.0));
        cfg.sampler = SamplerKind::Ddim { eta: 0.5 };
        cfg.reference_mode = ReferenceMode::NoisedAtT;
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| guided_sample(&world, &refs, 24, &ctx, &cfg).unwrap())
        };
        let a = run(1);
        assert_eq!(a, run(3));
        assert_eq!(a, run(8));
    }

    #[test]
    fn batching_uses_global_offsets() {
        let world = ring2();
        let s = make_linear_schedule(20, 1e-4, 0.02).unwrap();
        let ctx = RunContext::new(&s, SamplerKind::Ddpm, 13);
        let whole = unguided_sample(&world, 10, &ctx).unwrap();
        let parts = in_batches(10, 3, |offset, size| {
            unguided_sample(&world, size, &ctx.at_offset(offset))
        })
        .unwrap();
        assert_eq!(whole, parts);
    }

    #[test]
    fn guidance_errors() {
        let world = ring2();
        let s = make_linear_schedule(5, 1e-4, 0.02).unwrap();
        let ctx = RunContext::new(&s, SamplerKind::Ddpm, 0);
        let refs = ReferenceSet::new(Batch::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let bad = GuidanceConfig::new(-0.1, KernelSpec::rbf(1.0));
        assert!(guided_sample(&world, &refs, 4, &ctx, &bad).is_err());
        let wrong_dim = ReferenceSet::new(Batch::from_rows(&[vec![0.0; 3]]).unwrap());
        let cfg = GuidanceConfig::new(0.1, KernelSpec::rbf(1.0));
        assert!(guided_sample(&world, &wrong_dim, 4, &ctx, &cfg).is_err());
        let mut sep = cfg.clone();
        sep.separate_steps = Some(SeparateSteps {
            inner_steps: 0,
            every: 2,
        });
        assert!(sep.validate().is_err());
    }

    #[test]
    fn config_json() {
        let cfg = GuidanceConfig::new(0.1, KernelSpec::rbf(1.0));
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<GuidanceConfig>(&text).unwrap(), cfg);
        let minimal: GuidanceConfig = serde_json::from_str(
            r#"{"lambda_schedule":{"kind":"snr_scaled","lambda0":0.5},"kernel":{"kind":"rbf","sigma":1.0},"reference_mode":"noised_at_t"}"#,
        )
        .unwrap();
        assert_eq!(
            minimal.lambda_schedule,
            LambdaSchedule::SnrScaled { lambda0: 0.5 }
        );
        assert_eq!(minimal.reference_mode, ReferenceMode::NoisedAtT);
        assert_eq!(minimal.sampler, SamplerKind::Ddpm);
    }
}
