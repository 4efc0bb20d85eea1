//! High-probability bounds on the deviation of the empirical MMD cross-term
//! gradient from its population value, and Monte Carlo checks of them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::gmm::GmmSpec;
use crate::kernels::{lipschitz_l, lipschitz_lprime, sq_dist, KernelSpec, LatentKernel};
use crate::mmd::{cross_term_rows, Batch};

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "delta must lie in (0, 1), got {delta}"
        )))
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} must be positive, got {v}"
        )))
    }
}

fn check_count(n_ref: usize) -> Result<()> {
    if n_ref >= 1 {
        Ok(())
    } else {
        Err(Error::InvalidParameter("n_ref must be >= 1".into()))
    }
}

/// `(4 L / sqrt(n)) (1 + sqrt(2 ln(1/delta)))`.
pub fn pointwise_bound(l: f64, n_ref: usize, delta: f64) -> Result<f64> {
    check_positive("L", l)?;
    check_count(n_ref)?;
    check_delta(delta)?;
    Ok(4.0 * l / (n_ref as f64).sqrt() * (1.0 + (2.0 * (1.0 / delta).ln()).sqrt()))
}

/// RBF specialization `(3 / (sigma sqrt(n))) (1 + sqrt(2 ln(1/delta)))`.
pub fn rbf_pointwise_bound(sigma: f64, n_ref: usize, delta: f64) -> Result<f64> {
    check_positive("sigma", sigma)?;
    check_count(n_ref)?;
    check_delta(delta)?;
    Ok(3.0 / (sigma * (n_ref as f64).sqrt()) * (1.0 + (2.0 * (1.0 / delta).ln()).sqrt()))
}

/// Supremum bound over a radius-`radius` ball in `dim` dimensions:
/// `4 L' / sqrt(n) + (4 L / sqrt(n)) (1 + sqrt(2 dim ln(6 R sqrt(n)) + 2 ln(1/delta)))`.
pub fn uniform_bound(
    l: f64,
    lprime: f64,
    n_ref: usize,
    delta: f64,
    dim: usize,
    radius: f64,
) -> Result<f64> {
    check_positive("L", l)?;
    check_positive("L'", lprime)?;
    check_positive("radius", radius)?;
    check_count(n_ref)?;
    check_delta(delta)?;
    if dim == 0 {
        return Err(Error::InvalidParameter("dim must be >= 1".into()));
    }
    let root_n = (n_ref as f64).sqrt();
    let inner = 2.0 * dim as f64 * (6.0 * radius * root_n).ln() + 2.0 * (1.0 / delta).ln();
    if inner < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "radius {radius} too small for the covering argument (log term {inner})"
        )));
    }
    Ok(4.0 * lprime / root_n + 4.0 * l / root_n * (1.0 + inner.sqrt()))
}

/// Product-kernel bound; same form as [`pointwise_bound`] with the latent
/// constant `L_z`.
pub fn product_pointwise_bound(l_z: f64, n_ref: usize, delta: f64) -> Result<f64> {
    pointwise_bound(l_z, n_ref, delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundQuery {
    pub kernel: KernelSpec,
    pub n_ref: usize,
    pub delta: f64,
    pub dim: usize,
    #[serde(default)]
    pub radius: Option<f64>,
}

impl BoundQuery {
    pub fn pointwise(&self) -> Result<f64> {
        pointwise_bound(lipschitz_l(&self.kernel)?, self.n_ref, self.delta)
    }

    pub fn rbf(&self) -> Result<f64> {
        match self.kernel {
            KernelSpec::Rbf { sigma } => rbf_pointwise_bound(sigma, self.n_ref, self.delta),
            ref other => Err(Error::UnsupportedKernel(other.name())),
        }
    }

    pub fn uniform(&self) -> Result<f64> {
        let radius = self
            .radius
            .ok_or_else(|| Error::InvalidParameter("uniform bound needs a radius".into()))?;
        uniform_bound(
            lipschitz_l(&self.kernel)?,
            lipschitz_lprime(&self.kernel)?,
            self.n_ref,
            self.delta,
            self.dim,
            radius,
        )
    }
}

/// Reference distribution for the deviation experiments.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceLaw {
    Mixture(GmmSpec),
    Point(Vec<f64>),
}

impl ReferenceLaw {
    pub fn dim(&self) -> usize {
        match self {
            ReferenceLaw::Mixture(g) => g.dim(),
            ReferenceLaw::Point(p) => p.len(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        match self {
            ReferenceLaw::Mixture(g) => g.sample(n, rng),
            ReferenceLaw::Point(p) => Batch::from_rows(&vec![p.clone(); n]),
        }
    }
}

fn rbf_sigma(kernel: &KernelSpec) -> Result<f64> {
    match kernel {
        KernelSpec::Rbf { sigma } => Ok(*sigma),
        other => Err(Error::UnsupportedKernel(other.name())),
    }
}

/// Population cross term `-2 E_r[grad k(z0, r)]` in closed form: for each
/// component `N(mu, s^2 I)`,
/// `E[grad k] = (sigma^2/(sigma^2+s^2))^(d/2) exp(-|z0-mu|^2 / (2(sigma^2+s^2))) (mu-z0)/(sigma^2+s^2)`.
pub fn population_cross_term(
    z0: &[f64],
    law: &ReferenceLaw,
    kernel: &KernelSpec,
) -> Result<Vec<f64>> {
    let sigma = rbf_sigma(kernel)?;
    ensure_dim(law.dim(), z0.len())?;
    let s2 = sigma * sigma;
    let mut out = vec![0.0; z0.len()];
    let components: Vec<(f64, &[f64], f64)> = match law {
        ReferenceLaw::Mixture(g) => g
            .weights
            .iter()
            .zip(&g.means)
            .zip(&g.variances)
            .map(|((w, m), v)| (*w, m.as_slice(), *v))
            .collect(),
        ReferenceLaw::Point(p) => vec![(1.0, p.as_slice(), 0.0)],
    };
    let d = z0.len() as f64;
    for (w, mu, var) in components {
        if w == 0.0 {
            continue;
        }
        let total = s2 + var;
        let scale = (s2 / total).powf(d / 2.0) * (-sq_dist(z0, mu) / (2.0 * total)).exp() / total;
        for ((o, m), z) in out.iter_mut().zip(mu).zip(z0) {
            *o += -2.0 * w * scale * (m - z);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: Vec<f64>,
    /// Per-coordinate standard error of `mean`.
    pub std_error: Vec<f64>,
}

/// Population cross term by plain Monte Carlo over `draws` reference points.
pub fn population_cross_term_mc(
    z0: &[f64],
    law: &ReferenceLaw,
    kernel: &KernelSpec,
    draws: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    rbf_sigma(kernel)?;
    ensure_dim(law.dim(), z0.len())?;
    if draws < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: draws,
        });
    }
    let k = LatentKernel::resolve(kernel, z0.len())?;
    let d = z0.len();
    const CHUNK: usize = 10_000;
    let chunks = draws.div_ceil(CHUNK);
    let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let size = CHUNK.min(draws - c * CHUNK);
            let refs = law.sample(size, &mut rng)?;
            let mut sum = vec![0.0; d];
            let mut sum_sq = vec![0.0; d];
            for j in 0..size {
                let mut g = vec![0.0; d];
                k.add_grad_x(z0, refs.row(j), -2.0, &mut g);
                for c in 0..d {
                    sum[c] += g[c];
                    sum_sq[c] += g[c] * g[c];
                }
            }
            Ok((sum, sum_sq))
        })
        .collect::<Result<_>>()?;
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    for (s, q) in &partial {
        for c in 0..d {
            sum[c] += s[c];
            sum_sq[c] += q[c];
        }
    }
    let n = draws as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_error = (0..d)
        .map(|c| ((sum_sq[c] / n - mean[c] * mean[c]).max(0.0) * n / (n - 1.0) / n).sqrt())
        .collect();
    Ok(MonteCarloEstimate { mean, std_error })
}

fn trial_rng(seed: u64, purpose: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(trial as u64);
    rng
}

const MIN_TRIALS: usize = 100;
const MIN_PROBES: usize = 100;

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Sorted `|g_hat(z0) - g*(z0)|` over `trials` independent reference draws
/// of size `n_ref`.
pub fn empirical_pointwise_deviation(
    z0: &[f64],
    law: &ReferenceLaw,
    kernel: &KernelSpec,
    n_ref: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_count(n_ref)?;
    if trials < MIN_TRIALS {
        return Err(Error::InvalidParameter(format!(
            "need at least {MIN_TRIALS} trials, got {trials}"
        )));
    }
    let g_star = population_cross_term(z0, law, kernel)?;
    let k = LatentKernel::resolve(kernel, z0.len())?;
    let mut out: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(seed, 1, trial);
            let refs = law.sample(n_ref, &mut rng)?;
            Ok(norm_diff(&cross_term_rows(z0, &refs, &k), &g_star))
        })
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| a.total_cmp(b));
    Ok(out)
}

/// `count` points uniform in the centered ball of radius `radius`.
pub fn ball_probes(dim: usize, count: usize, radius: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = trial_rng(seed, 3, 0);
    (0..count)
        .map(|_| {
            let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let u: f64 = rng.random();
            let r = radius * u.powf(1.0 / dim as f64);
            dir.into_iter().map(|v| v * r / norm).collect()
        })
        .collect()
}

/// Per trial, the largest deviation over `probe_points` probes uniform in the
/// radius ball: a lower estimate of the supremum. Probes are shared by all
/// trials and nested across probe counts for a fixed seed. Returned sorted.
pub fn empirical_uniform_deviation(
    law: &ReferenceLaw,
    kernel: &KernelSpec,
    n_ref: usize,
    probe_points: usize,
    radius: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_count(n_ref)?;
    check_positive("radius", radius)?;
    if probe_points < MIN_PROBES {
        return Err(Error::InvalidParameter(format!(
            "need at least {MIN_PROBES} probe points, got {probe_points}"
        )));
    }
    if trials < MIN_TRIALS {
        return Err(Error::InvalidParameter(format!(
            "need at least {MIN_TRIALS} trials, got {trials}"
        )));
    }
    let probes = ball_probes(law.dim(), probe_points, radius, seed);
    let stars: Vec<Vec<f64>> = probes
        .iter()
        .map(|z| population_cross_term(z, law, kernel))
        .collect::<Result<_>>()?;
    let k = LatentKernel::resolve(kernel, law.dim())?;
    let mut out: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(seed, 2, trial);
            let refs = law.sample(n_ref, &mut rng)?;
            Ok(probes
                .iter()
                .zip(&stars)
                .map(|(z, g)| norm_diff(&cross_term_rows(z, &refs, &k), g))
                .fold(0.0, f64::max))
        })
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| a.total_cmp(b));
    Ok(out)
}

/// Empirical `(1 - delta)`-quantile of sorted values.
pub fn upper_quantile(sorted: &[f64], delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if sorted.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let idx = ((1.0 - delta) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[idx.clamp(1, sorted.len()) - 1])
}

pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Reference law and query point for one grid cell: `Q = N(0, (sigma^2/d) I)`
/// and `z0 = sigma e_1`, so that `|z0 - r|` is of order `sigma` in every
/// dimension.
pub fn grid_cell_setup(sigma: f64, dim: usize) -> Result<(ReferenceLaw, Vec<f64>)> {
    let law = GmmSpec::new(
        vec![1.0],
        vec![vec![0.0; dim]],
        vec![sigma * sigma / dim as f64],
    )?;
    let mut z0 = vec![0.0; dim];
    z0[0] = sigma;
    Ok((ReferenceLaw::Mixture(law), z0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub sigmas: Vec<f64>,
    pub n_refs: Vec<usize>,
    pub deltas: Vec<f64>,
    pub dims: Vec<usize>,
    pub trials: usize,
    /// Multiplies the bound; values below 1 corrupt it for self-tests.
    #[serde(default = "unit")]
    pub bound_scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            sigmas: vec![0.5, 1.0, 2.0],
            n_refs: vec![25, 100, 400],
            deltas: vec![0.05, 0.2],
            dims: vec![2, 10, 50],
            trials: 1000,
            bound_scale: 1.0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty()
            || self.n_refs.is_empty()
            || self.deltas.is_empty()
            || self.dims.is_empty()
        {
            return Err(Error::InvalidParameter(
                "concentration grid has an empty axis".into(),
            ));
        }
        if self.trials < MIN_TRIALS {
            return Err(Error::InvalidParameter(format!(
                "need at least {MIN_TRIALS} trials, got {}",
                self.trials
            )));
        }
        check_positive("bound_scale", self.bound_scale)?;
        for &s in &self.sigmas {
            check_positive("sigma", s)?;
        }
        for &d in &self.deltas {
            check_delta(d)?;
        }
        for &n in &self.n_refs {
            check_count(n)?;
        }
        if self.dims.contains(&0) {
            return Err(Error::InvalidParameter("dims must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub sigma: f64,
    pub n_ref: usize,
    pub delta: f64,
    pub dim: usize,
    pub quantile: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Median deviation at `n_ref` divided by the median at the next grid value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkRow {
    pub sigma: f64,
    pub dim: usize,
    pub n_ref: usize,
    pub n_ref_next: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    pub shrink: Vec<ShrinkRow>,
}

impl GridReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Runs every `(sigma, n_ref, delta, dim)` cell; deviations are shared by
/// the cells that differ only in `delta`.
pub fn run_grid(cfg: &GridConfig, seed: u64) -> Result<GridReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut shrink = Vec::new();
    for (si, &sigma) in cfg.sigmas.iter().enumerate() {
        let kernel = KernelSpec::rbf(sigma);
        for (di, &dim) in cfg.dims.iter().enumerate() {
            let (law, z0) = grid_cell_setup(sigma, dim)?;
            let mut medians = Vec::new();
            for (ni, &n_ref) in cfg.n_refs.iter().enumerate() {
                let cell_seed = seed ^ ((si as u64) << 40 | (di as u64) << 20 | ni as u64);
                let devs = empirical_pointwise_deviation(
                    &z0, &law, &kernel, n_ref, cfg.trials, cell_seed,
                )?;
                medians.push(median(&devs));
                for &delta in &cfg.deltas {
                    let quantile = upper_quantile(&devs, delta)?;
                    let bound = cfg.bound_scale * rbf_pointwise_bound(sigma, n_ref, delta)?;
                    rows.push(GridRow {
                        sigma,
                        n_ref,
                        delta,
                        dim,
                        quantile,
                        bound,
                        pass: quantile <= bound,
                    });
                }
            }
            for ni in 1..cfg.n_refs.len() {
                shrink.push(ShrinkRow {
                    sigma,
                    dim,
                    n_ref: cfg.n_refs[ni - 1],
                    n_ref_next: cfg.n_refs[ni],
                    ratio: medians[ni - 1] / medians[ni],
                });
            }
        }
    }
    Ok(GridReport { rows, shrink })
}
