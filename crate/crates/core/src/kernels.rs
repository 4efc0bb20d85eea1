//! Positive semi-definite kernels on latents and prompt embeddings.
//!
//! [`KernelSpec`] is the serializable description used in experiment configs
//! (`{"kind": "rbf", "sigma": 1.0}`, ...). Hot loops resolve a spec once into a
//! [`LatentKernel`] or [`PromptKernel`], which evaluate without any
//! per-call validation.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

fn default_offset() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(-|x - y|^2 / (2 sigma^2))`
    Rbf {
        sigma: f64,
    },
    /// `(offset + scale * <x, y>)^degree`; `scale` defaults to `1 / dim`.
    Polynomial {
        degree: u32,
        #[serde(default = "default_offset")]
        offset: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<f64>,
    },
    /// 1 when the embeddings are element-wise equal, 0 otherwise.
    PromptDelta,
    PromptRbf {
        sigma: f64,
    },
    /// `k_p(p, p') * k_z(z, z')`
    Product {
        prompt: Box<KernelSpec>,
        latent: Box<KernelSpec>,
    },
}

impl KernelSpec {
    pub fn rbf(sigma: f64) -> Self {
        KernelSpec::Rbf { sigma }
    }

    pub fn polynomial(degree: u32, offset: f64, scale: f64) -> Self {
        KernelSpec::Polynomial {
            degree,
            offset,
            scale: Some(scale),
        }
    }

    pub fn product(prompt: KernelSpec, latent: KernelSpec) -> Self {
        KernelSpec::Product {
            prompt: Box::new(prompt),
            latent: Box::new(latent),
        }
    }

    pub fn is_latent(&self) -> bool {
        matches!(self, KernelSpec::Rbf { .. } | KernelSpec::Polynomial { .. })
    }

    pub fn is_prompt(&self) -> bool {
        matches!(self, KernelSpec::PromptDelta | KernelSpec::PromptRbf { .. })
    }

    pub fn name(&self) -> String {
        match self {
            KernelSpec::Rbf { sigma } => format!("rbf(sigma={sigma})"),
            KernelSpec::Polynomial {
                degree,
                offset,
                scale,
            } => match scale {
                Some(s) => format!("poly(r={degree},c={offset},gamma={s})"),
                None => format!("poly(r={degree},c={offset})"),
            },
            KernelSpec::PromptDelta => "prompt_delta".to_string(),
            KernelSpec::PromptRbf { sigma } => format!("prompt_rbf(sigma={sigma})"),
            KernelSpec::Product { prompt, latent } => {
                format!("{}x{}", prompt.name(), latent.name())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Rbf { sigma } | KernelSpec::PromptRbf { sigma } => {
                if !(sigma.is_finite() && *sigma > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "bandwidth must be positive, got {sigma}"
                    )));
                }
            }
            KernelSpec::Polynomial {
                degree,
                offset,
                scale,
            } => {
                if *degree < 1 {
                    return Err(Error::InvalidParameter(
                        "polynomial degree must be >= 1".into(),
                    ));
                }
                if !(offset.is_finite() && *offset >= 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "polynomial offset must be >= 0, got {offset}"
                    )));
                }
                if let Some(s) = scale {
                    if !(s.is_finite() && *s > 0.0) {
                        return Err(Error::InvalidParameter(format!(
                            "polynomial scale must be positive, got {s}"
                        )));
                    }
                }
            }
            KernelSpec::PromptDelta => {}
            KernelSpec::Product { prompt, latent } => {
                if !prompt.is_prompt() || !latent.is_latent() {
                    return Err(Error::InvalidParameter(
                        "product kernel must pair one prompt kernel with one latent kernel".into(),
                    ));
                }
                prompt.validate()?;
                latent.validate()?;
            }
        }
        Ok(())
    }

    /// The latent factor of this kernel: itself for latent kernels, the
    /// `latent` half of a product.
    pub fn latent_part(&self) -> Result<&KernelSpec> {
        match self {
            KernelSpec::Rbf { .. } | KernelSpec::Polynomial { .. } => Ok(self),
            KernelSpec::Product { latent, .. } => Ok(latent),
            other => Err(Error::UnsupportedKernel(other.name())),
        }
    }

    pub fn prompt_part(&self) -> Result<&KernelSpec> {
        match self {
            KernelSpec::PromptDelta | KernelSpec::PromptRbf { .. } => Ok(self),
            KernelSpec::Product { prompt, .. } => Ok(prompt),
            other => Err(Error::UnsupportedKernel(other.name())),
        }
    }
}

/// A latent kernel with its parameters resolved for a fixed dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatentKernel {
    Rbf {
        inv_sigma2: f64,
    },
    Polynomial {
        degree: u32,
        offset: f64,
        scale: f64,
    },
}

impl LatentKernel {
    pub fn resolve(spec: &KernelSpec, dim: usize) -> Result<Self> {
        spec.validate()?;
        match *spec {
            KernelSpec::Rbf { sigma } => Ok(LatentKernel::Rbf {
                inv_sigma2: 1.0 / (sigma * sigma),
            }),
            KernelSpec::Polynomial {
                degree,
                offset,
                scale,
            } => Ok(LatentKernel::Polynomial {
                degree,
                offset,
                scale: scale.unwrap_or(1.0 / dim.max(1) as f64),
            }),
            _ => Err(Error::UnsupportedKernel(spec.name())),
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            LatentKernel::Rbf { inv_sigma2 } => (-0.5 * sq_dist(x, y) * inv_sigma2).exp(),
            LatentKernel::Polynomial {
                degree,
                offset,
                scale,
            } => (offset + scale * dot(x, y)).powi(degree as i32),
        }
    }

    /// Adds `weight * grad_x k(x, y)` into `out`.
    #[inline]
    pub fn add_grad_x(&self, x: &[f64], y: &[f64], weight: f64, out: &mut [f64]) {
        match *self {
            LatentKernel::Rbf { inv_sigma2 } => {
                let k = (-0.5 * sq_dist(x, y) * inv_sigma2).exp();
                let c = weight * k * inv_sigma2;
                for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
                    *o += c * (yi - xi);
                }
            }
            LatentKernel::Polynomial {
                degree,
                offset,
                scale,
            } => {
                let base = offset + scale * dot(x, y);
                let c = weight * degree as f64 * scale * base.powi(degree as i32 - 1);
                for (o, yi) in out.iter_mut().zip(y) {
                    *o += c * yi;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PromptKernel {
    Delta,
    Rbf { inv_sigma2: f64 },
}

impl PromptKernel {
    pub fn resolve(spec: &KernelSpec) -> Result<Self> {
        spec.validate()?;
        match *spec {
            KernelSpec::PromptDelta => Ok(PromptKernel::Delta),
            KernelSpec::PromptRbf { sigma } => Ok(PromptKernel::Rbf {
                inv_sigma2: 1.0 / (sigma * sigma),
            }),
            _ => Err(Error::UnsupportedKernel(spec.name())),
        }
    }

    #[inline]
    pub fn eval(&self, p: &[f64], q: &[f64]) -> f64 {
        match *self {
            PromptKernel::Delta => {
                if p == q {
                    1.0
                } else {
                    0.0
                }
            }
            PromptKernel::Rbf { inv_sigma2 } => (-0.5 * sq_dist(p, q) * inv_sigma2).exp(),
        }
    }
}

#[inline]
pub(crate) fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    ensure_dim(x.len(), y.len())?;
    Ok(LatentKernel::resolve(spec, x.len())?.eval(x, y))
}

pub fn kernel_grad_x(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    ensure_dim(x.len(), y.len())?;
    let kernel = LatentKernel::resolve(spec, x.len())?;
    let mut out = vec![0.0; x.len()];
    kernel.add_grad_x(x, y, 1.0, &mut out);
    Ok(out)
}

pub fn prompt_kernel_eval(spec: &KernelSpec, p: &[f64], q: &[f64]) -> Result<f64> {
    ensure_dim(p.len(), q.len())?;
    Ok(PromptKernel::resolve(spec)?.eval(p, q))
}

/// `sup |grad_x k(x, y)|` for the RBF kernel: `1 / (sigma sqrt(e))`.
pub fn lipschitz_l(spec: &KernelSpec) -> Result<f64> {
    match *spec {
        KernelSpec::Rbf { sigma } => {
            spec.validate()?;
            Ok(1.0 / (sigma * std::f64::consts::E.sqrt()))
        }
        _ => Err(Error::UnsupportedKernel(spec.name())),
    }
}

/// Upper bound on the Lipschitz constant of `grad_x k` for the RBF kernel:
/// `2 / (sigma^2 sqrt(e))`.
pub fn lipschitz_lprime(spec: &KernelSpec) -> Result<f64> {
    match *spec {
        KernelSpec::Rbf { sigma } => {
            spec.validate()?;
            Ok(2.0 / (sigma * sigma * std::f64::consts::E.sqrt()))
        }
        _ => Err(Error::UnsupportedKernel(spec.name())),
    }
}
