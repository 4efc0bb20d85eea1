//! Isotropic Gaussian mixtures: the data distribution of the testbed and the
//! closed-form score of its noised marginals, which stands in for a trained
//! noise-prediction network.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::kernels::sq_dist;
use crate::mmd::Batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl GmmSpec {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let spec = GmmSpec {
            weights,
            means,
            variances,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `components` equal-weight unit-variance modes at `radius` on the first
    /// two coordinates, angles `2 pi k / components`; other coordinates zero.
    pub fn ring(components: usize, radius: f64, dim: usize) -> Result<Self> {
        if dim < 2 || components == 0 {
            return Err(Error::InvalidParameter(
                "ring world needs dim >= 2 and at least one component".into(),
            ));
        }
        let means = (0..components)
            .map(|k| {
                let angle = 2.0 * PI * k as f64 / components as f64;
                let mut mean = vec![0.0; dim];
                mean[0] = radius * angle.cos();
                mean[1] = radius * angle.sin();
                mean
            })
            .collect();
        GmmSpec::new(
            vec![1.0 / components as f64; components],
            means,
            vec![1.0; components],
        )
    }

    /// `side x side` unit-variance modes on a centered grid with `spacing`.
    pub fn grid(side: usize, spacing: f64, dim: usize) -> Result<Self> {
        if dim < 2 || side == 0 {
            return Err(Error::InvalidParameter(
                "grid world needs dim >= 2 and side >= 1".into(),
            ));
        }
        let center = (side as f64 - 1.0) / 2.0;
        let mut means = Vec::with_capacity(side * side);
        for row in 0..side {
            for col in 0..side {
                let mut mean = vec![0.0; dim];
                mean[0] = (col as f64 - center) * spacing;
                mean[1] = (row as f64 - center) * spacing;
                means.push(mean);
            }
        }
        let k = means.len();
        GmmSpec::new(vec![1.0 / k as f64; k], means, vec![1.0; k])
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 {
            return Err(Error::InvalidParameter("mixture has no components".into()));
        }
        ensure_dim(k, self.means.len())?;
        ensure_dim(k, self.variances.len())?;
        let dim = self.means[0].len();
        if dim == 0 {
            return Err(Error::InvalidParameter("mixture means are empty".into()));
        }
        for mean in &self.means {
            ensure_dim(dim, mean.len())?;
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("non-finite mixture mean".into()));
            }
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParameter(
                "mixture weights must be >= 0".into(),
            ));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        if self.variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter(
                "mixture variances must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// The sub-mixture on `components` with renormalized weights, in the
    /// given order.
    pub fn restrict(&self, components: &[usize]) -> Result<GmmSpec> {
        if components.is_empty() {
            return Err(Error::InvalidParameter("empty component set".into()));
        }
        for &c in components {
            if c >= self.components() {
                return Err(Error::InvalidParameter(format!(
                    "component {c} out of range (mixture has {})",
                    self.components()
                )));
            }
        }
        let total: f64 = components.iter().map(|&c| self.weights[c]).sum();
        if total <= 0.0 {
            return Err(Error::Degenerate(
                "selected components carry zero weight".into(),
            ));
        }
        let mut weights: Vec<f64> = components
            .iter()
            .map(|&c| self.weights[c] / total)
            .collect();
        renormalize(&mut weights);
        Ok(GmmSpec {
            weights,
            means: components.iter().map(|&c| self.means[c].clone()).collect(),
            variances: components.iter().map(|&c| self.variances[c]).collect(),
        })
    }

    /// Same means and variances, new weights.
    pub fn reweighted(&self, weights: Vec<f64>) -> Result<GmmSpec> {
        GmmSpec::new(weights, self.means.clone(), self.variances.clone())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        Ok(self.sample_labeled(n, rng)?.0)
    }

    /// Draws `n` samples and returns the component index of each.
    pub fn sample_labeled<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<(Batch, Vec<usize>)> {
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let dim = self.dim();
        let mut data = Array2::<f64>::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        for mut row in data.rows_mut() {
            let k = self.draw_component(rng);
            let sd = self.variances[k].sqrt();
            for (v, mu) in row.iter_mut().zip(&self.means[k]) {
                let e: f64 = rng.sample(StandardNormal);
                *v = mu + sd * e;
            }
            labels.push(k);
        }
        Ok((Batch::new(data)?, labels))
    }

    fn draw_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (k, w) in self.weights.iter().enumerate() {
            if *w > 0.0 {
                last_positive = k;
                acc += w;
                if u < acc {
                    return k;
                }
            }
        }
        last_positive
    }

    /// Marginal of `sqrt(abar) z0 + sqrt(1 - abar) eps` for `z0` from this
    /// mixture.
    pub fn noised(&self, abar: f64) -> Result<GmmSpec> {
        check_abar(abar)?;
        if abar == 1.0 {
            return Ok(self.clone());
        }
        let scale = abar.sqrt();
        Ok(GmmSpec {
            weights: self.weights.clone(),
            means: self
                .means
                .iter()
                .map(|m| m.iter().map(|v| scale * v).collect())
                .collect(),
            variances: self
                .variances
                .iter()
                .map(|v| abar * v + (1.0 - abar))
                .collect(),
        })
    }

    fn log_terms(&self, z: &[f64]) -> Vec<f64> {
        let dim = z.len() as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, m), v)| {
                if *w <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    w.ln() - 0.5 * dim * (2.0 * PI * v).ln() - 0.5 * sq_dist(z, m) / v
                }
            })
            .collect()
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        ensure_dim(self.dim(), z.len())?;
        Ok(log_sum_exp(&self.log_terms(z)))
    }

    /// Posterior component probabilities at `z`, via log-sum-exp.
    pub fn responsibilities(&self, z: &[f64]) -> Result<Vec<f64>> {
        ensure_dim(self.dim(), z.len())?;
        Ok(self.responsibilities_unchecked(z))
    }

    fn responsibilities_unchecked(&self, z: &[f64]) -> Vec<f64> {
        let logs = self.log_terms(z);
        let lse = log_sum_exp(&logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }

    fn score_unchecked(&self, z: &[f64]) -> Vec<f64> {
        let resp = self.responsibilities_unchecked(z);
        let mut out = vec![0.0; z.len()];
        for ((r, m), v) in resp.iter().zip(&self.means).zip(&self.variances) {
            if *r == 0.0 {
                continue;
            }
            let c = r / v;
            for ((o, mi), zi) in out.iter_mut().zip(m).zip(z) {
                *o += c * (mi - zi);
            }
        }
        out
    }

    /// `grad log p_t(z)` of the mixture noised to `abar`.
    pub fn score(&self, z: &[f64], abar: f64) -> Result<Vec<f64>> {
        ensure_dim(self.dim(), z.len())?;
        Ok(self.noised(abar)?.score_unchecked(z))
    }

    /// Noise prediction `-sqrt(1 - abar) * score`.
    pub fn eps_pred(&self, z: &[f64], abar: f64) -> Result<Vec<f64>> {
        check_abar(abar)?;
        if abar >= 1.0 {
            return Err(Error::Degenerate(
                "noise prediction undefined at abar = 1".into(),
            ));
        }
        let scale = -(1.0 - abar).sqrt();
        let mut s = self.score(z, abar)?;
        s.iter_mut().for_each(|v| *v *= scale);
        Ok(s)
    }

    /// Noise prediction of the sub-mixture on `components`.
    pub fn conditional_eps_pred(
        &self,
        z: &[f64],
        abar: f64,
        components: &[usize],
    ) -> Result<Vec<f64>> {
        if components.is_empty() {
            return Err(Error::InvalidParameter("empty component set".into()));
        }
        let mut sorted = components.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() == self.components() && sorted.iter().enumerate().all(|(i, c)| i == *c) {
            return self.eps_pred(z, abar);
        }
        self.restrict(&sorted)?.eps_pred(z, abar)
    }

    /// Argmax-responsibility component of each row; ties go to the lowest
    /// index.
    pub fn assign_components(&self, batch: &Batch) -> Result<Vec<usize>> {
        ensure_dim(self.dim(), batch.dim())?;
        Ok((0..batch.len())
            .map(|i| {
                let logs = self.log_terms(batch.row(i));
                let mut best = 0;
                for (k, l) in logs.iter().enumerate() {
                    if *l > logs[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }
}

fn check_abar(abar: f64) -> Result<()> {
    if abar > 0.0 && abar <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "abar must lie in (0, 1], got {abar}"
        )))
    }
}

fn renormalize(weights: &mut [f64]) {
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Fraction of labels equal to each component index.
pub fn histogram(labels: &[usize], components: usize) -> Vec<f64> {
    let mut counts = vec![0usize; components];
    for &l in labels {
        if l < components {
            counts[l] += 1;
        }
    }
    let n = labels.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// A mixture whose components are each tied to one prompt embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptedGmm {
    pub base: GmmSpec,
    pub prompt_of_component: Vec<Vec<f64>>,
}

impl PromptedGmm {
    pub fn new(base: GmmSpec, prompt_of_component: Vec<Vec<f64>>) -> Result<Self> {
        base.validate()?;
        ensure_dim(base.components(), prompt_of_component.len())?;
        let width = prompt_of_component[0].len();
        for p in &prompt_of_component {
            ensure_dim(width, p.len())?;
        }
        Ok(PromptedGmm {
            base,
            prompt_of_component,
        })
    }

    /// Component `k` gets the one-dimensional embedding `[k]`.
    pub fn indexed(base: GmmSpec) -> Result<Self> {
        let prompts = (0..base.components()).map(|k| vec![k as f64]).collect();
        PromptedGmm::new(base, prompts)
    }

    pub fn prompt_dim(&self) -> usize {
        self.prompt_of_component[0].len()
    }

    /// Components whose embedding equals `prompt` exactly.
    pub fn components_for(&self, prompt: &[f64]) -> Vec<usize> {
        self.prompt_of_component
            .iter()
            .enumerate()
            .filter(|(_, p)| p.as_slice() == prompt)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Gamma-ratio Dirichlet draw.
pub fn dirichlet_weights<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(Error::InvalidParameter("empty Dirichlet parameter".into()));
    }
    if alpha.len() == 1 {
        if alpha[0].is_nan() || alpha[0] <= 0.0 {
            return Err(Error::InvalidParameter(
                "Dirichlet parameters must be positive".into(),
            ));
        }
        return Ok(vec![1.0]);
    }
    let mut draws = Vec::with_capacity(alpha.len());
    for &a in alpha {
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "Dirichlet parameters must be positive, got {a}"
            )));
        }
        let gamma = Gamma::new(a, 1.0).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        draws.push(gamma.sample(rng));
    }
    renormalize(&mut draws);
    Ok(draws)
}
