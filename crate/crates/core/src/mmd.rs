//! Empirical squared MMD between a generated batch and a reference set, and
//! its gradient with respect to every generated sample.
//!
//! All reductions run in a fixed order (row `i` outer, column `j` inner).
//! Rows may be computed on any rayon worker; each row's arithmetic is
//! independent of the others, so results are bit-identical at any thread
//! count.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{ensure_dim, Error, Result};
use crate::kernels::{KernelSpec, LatentKernel, PromptKernel};

/// `n x d` latent samples, optionally paired with one prompt embedding each.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    data: Array2<f64>,
    prompts: Option<Array2<f64>>,
}

impl Batch {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(Batch {
            data: data.as_standard_layout().into_owned(),
            prompts: None,
        })
    }

    pub fn with_prompts(data: Array2<f64>, prompts: Array2<f64>) -> Result<Self> {
        let mut batch = Batch::new(data)?;
        ensure_dim(batch.len(), prompts.nrows())?;
        batch.prompts = Some(prompts.as_standard_layout().into_owned());
        Ok(batch)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().ok_or(Error::EmptyBatch)?.len();
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            ensure_dim(dim, row.len())?;
            flat.extend_from_slice(row);
        }
        let data =
            Array2::from_shape_vec((rows.len(), dim), flat).expect("row lengths were checked");
        Batch::new(data)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn prompts(&self) -> Option<&Array2<f64>> {
        self.prompts.as_ref()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let start = i * self.data.ncols();
        &self.data.as_slice().expect("standard layout")[start..start + self.data.ncols()]
    }

    #[inline]
    pub fn prompt(&self, i: usize) -> Option<&[f64]> {
        self.prompts.as_ref().map(|p| {
            let w = p.ncols();
            &p.as_slice().expect("standard layout")[i * w..(i + 1) * w]
        })
    }

    /// Keeps only the first `k` latent coordinates.
    pub fn leading_coords(&self, k: usize) -> Batch {
        let k = k.min(self.dim());
        Batch {
            data: self.data.slice(ndarray::s![.., ..k]).to_owned(),
            prompts: self.prompts.clone(),
        }
    }

    /// Row-wise concatenation; prompts are kept only if both sides have them.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        ensure_dim(self.dim(), other.dim())?;
        let data = ndarray::concatenate(Axis(0), &[self.data.view(), other.data.view()])
            .expect("dims checked");
        let prompts = match (&self.prompts, &other.prompts) {
            (Some(a), Some(b)) => {
                ensure_dim(a.ncols(), b.ncols())?;
                Some(ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("dims checked"))
            }
            _ => None,
        };
        Ok(Batch { data, prompts })
    }

    pub fn select(&self, rows: &[usize]) -> Result<Batch> {
        if rows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(Batch {
            data: self.data.select(Axis(0), rows),
            prompts: self.prompts.as_ref().map(|p| p.select(Axis(0), rows)),
        })
    }
}

/// Reference samples with a cached reference self-term.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    batch: Batch,
    bound: Option<(KernelSpec, f64)>,
}

impl ReferenceSet {
    pub fn new(batch: Batch) -> Self {
        ReferenceSet { batch, bound: None }
    }

    /// Builds the set and caches the self-term for `kernel`.
    pub fn bound_to(batch: Batch, kernel: &KernelSpec) -> Result<Self> {
        let mut refs = ReferenceSet::new(batch);
        refs.bind_kernel(kernel)?;
        Ok(refs)
    }

    pub fn batch(&self) -> &Batch {
        &self.batch
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.batch.dim()
    }

    /// Computes and caches `(1/m^2) sum_{j,j'} k(z_j, z_j')`, prompt-weighted
    /// for product kernels.
    pub fn bind_kernel(&mut self, kernel: &KernelSpec) -> Result<f64> {
        let value = self_term(&self.batch, kernel)?;
        self.bound = Some((kernel.clone(), value));
        Ok(value)
    }

    pub fn cached_self_term(&self) -> Option<f64> {
        self.bound.as_ref().map(|(_, v)| *v)
    }

    fn self_term_for(&self, kernel: &KernelSpec) -> Result<f64> {
        match &self.bound {
            Some((k, v)) if k == kernel => Ok(*v),
            _ => self_term(&self.batch, kernel),
        }
    }
}

fn self_term(batch: &Batch, kernel: &KernelSpec) -> Result<f64> {
    match kernel {
        KernelSpec::Product { .. } => {
            let parts = ProductParts::resolve(kernel, batch.dim())?;
            let prompts = batch.prompts().ok_or(Error::MissingPrompts)?;
            Ok(weighted_mean(
                batch,
                prompts.view(),
                batch,
                prompts.view(),
                &parts,
                false,
            ))
        }
        _ => {
            let k = LatentKernel::resolve(kernel, batch.dim())?;
            Ok(mean_kernel(batch, batch, &k, false))
        }
    }
}

struct ProductParts {
    prompt: PromptKernel,
    latent: LatentKernel,
}

impl ProductParts {
    fn resolve(kernel: &KernelSpec, dim: usize) -> Result<Self> {
        match kernel {
            KernelSpec::Product { prompt, latent } => {
                kernel.validate()?;
                Ok(ProductParts {
                    prompt: PromptKernel::resolve(prompt)?,
                    latent: LatentKernel::resolve(latent, dim)?,
                })
            }
            other => Err(Error::UnsupportedKernel(other.name())),
        }
    }
}

/// Mean of `k(a_i, b_j)` over all pairs, or over `i != j` when
/// `skip_diagonal` (requires equal-size inputs).
pub(crate) fn mean_kernel(a: &Batch, b: &Batch, k: &LatentKernel, skip_diagonal: bool) -> f64 {
    let rows: Vec<f64> = (0..a.len())
        .into_par_iter()
        .map(|i| {
            let x = a.row(i);
            let mut acc = 0.0;
            for j in 0..b.len() {
                if skip_diagonal && i == j {
                    continue;
                }
                acc += k.eval(x, b.row(j));
            }
            acc
        })
        .collect();
    let total: f64 = rows.iter().sum();
    let pairs = if skip_diagonal {
        a.len() * (a.len() - 1)
    } else {
        a.len() * b.len()
    };
    total / pairs as f64
}

fn weighted_mean(
    a: &Batch,
    pa: ArrayView2<f64>,
    b: &Batch,
    pb: ArrayView2<f64>,
    parts: &ProductParts,
    skip_diagonal: bool,
) -> f64 {
    let rows: Vec<f64> = (0..a.len())
        .into_par_iter()
        .map(|i| {
            let x = a.row(i);
            let p = pa.row(i);
            let p = p.as_slice().expect("standard layout");
            let mut acc = 0.0;
            for j in 0..b.len() {
                if skip_diagonal && i == j {
                    continue;
                }
                let q = pb.row(j);
                let w = parts.prompt.eval(p, q.as_slice().expect("standard layout"));
                acc += w * parts.latent.eval(x, b.row(j));
            }
            acc
        })
        .collect();
    let total: f64 = rows.iter().sum();
    let pairs = if skip_diagonal {
        a.len() * (a.len() - 1)
    } else {
        a.len() * b.len()
    };
    total / pairs as f64
}

fn check_latent(p: &Batch, q: &ReferenceSet, k: &KernelSpec) -> Result<LatentKernel> {
    ensure_dim(p.dim(), q.dim())?;
    if q.is_empty() {
        return Err(Error::EmptyBatch);
    }
    LatentKernel::resolve(k, p.dim())
}

/// Biased (V-statistic) squared MMD, diagonal terms included.
pub fn mmd2_biased(p: &Batch, q: &ReferenceSet, k: &KernelSpec) -> Result<f64> {
    let kernel = check_latent(p, q, k)?;
    let pp = mean_kernel(p, p, &kernel, false);
    let qq = q.self_term_for(k)?;
    let pq = mean_kernel(p, q.batch(), &kernel, false);
    Ok(pp + qq - 2.0 * pq)
}

/// Unbiased (U-statistic) squared MMD; may be negative.
pub fn mmd2_unbiased(p: &Batch, q: &ReferenceSet, k: &KernelSpec) -> Result<f64> {
    let kernel = check_latent(p, q, k)?;
    for n in [p.len(), q.len()] {
        if n < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: n });
        }
    }
    let pp = mean_kernel(p, p, &kernel, true);
    let qq = mean_kernel(q.batch(), q.batch(), &kernel, true);
    let pq = mean_kernel(p, q.batch(), &kernel, false);
    Ok(pp + qq - 2.0 * pq)
}

/// Per-sample gradient of [`mmd2_biased`]:
/// row `i` is `(2/B^2) sum_j grad k(z_i, z_j) - (2/(B m)) sum_j grad k(z_i, r_j)`.
pub fn mmd2_grad(p: &Batch, q: &ReferenceSet, k: &KernelSpec) -> Result<Array2<f64>> {
    let kernel = check_latent(p, q, k)?;
    Ok(gradient_rows(p, q.batch(), &kernel, None))
}

/// Prompt weights for the product-kernel gradient.
struct PromptWeights<'a> {
    prompt: PromptKernel,
    batch_prompts: &'a Batch,
    cross: ArrayView2<'a, f64>,
}

fn gradient_rows(
    p: &Batch,
    refs: &Batch,
    kernel: &LatentKernel,
    weights: Option<&PromptWeights<'_>>,
) -> Array2<f64> {
    let b = p.len() as f64;
    let m = refs.len() as f64;
    let intra_scale = 2.0 / (b * b);
    let cross_scale = 2.0 / (b * m);
    let dim = p.dim();
    let mut out = Array2::<f64>::zeros((p.len(), dim));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let x = p.row(i);
            let mut intra = vec![0.0; dim];
            let mut cross = vec![0.0; dim];
            match weights {
                None => {
                    for j in 0..p.len() {
                        kernel.add_grad_x(x, p.row(j), 1.0, &mut intra);
                    }
                    for j in 0..refs.len() {
                        kernel.add_grad_x(x, refs.row(j), 1.0, &mut cross);
                    }
                }
                Some(w) => {
                    let pi = w.batch_prompts.prompt(i).expect("prompts checked");
                    for j in 0..p.len() {
                        let pj = w.batch_prompts.prompt(j).expect("prompts checked");
                        let wij = w.prompt.eval(pi, pj);
                        if wij != 0.0 {
                            kernel.add_grad_x(x, p.row(j), wij, &mut intra);
                        }
                    }
                    for j in 0..refs.len() {
                        let wij = w.cross[[i, j]];
                        if wij != 0.0 {
                            kernel.add_grad_x(x, refs.row(j), wij, &mut cross);
                        }
                    }
                }
            }
            for (o, (a, c)) in row.iter_mut().zip(intra.iter().zip(&cross)) {
                *o = intra_scale * a - cross_scale * c;
            }
        });
    out
}

/// Empirical cross term `-(2/m) sum_j grad k(z0, r_j)`; RBF kernels only.
pub fn cross_term_grad(z0: &[f64], q: &ReferenceSet, k: &KernelSpec) -> Result<Vec<f64>> {
    if !matches!(k, KernelSpec::Rbf { .. }) {
        return Err(Error::UnsupportedKernel(k.name()));
    }
    ensure_dim(q.dim(), z0.len())?;
    if q.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let kernel = LatentKernel::resolve(k, z0.len())?;
    Ok(cross_term_rows(z0, q.batch(), &kernel))
}

pub(crate) fn cross_term_rows(z0: &[f64], refs: &Batch, kernel: &LatentKernel) -> Vec<f64> {
    let mut acc = vec![0.0; z0.len()];
    for j in 0..refs.len() {
        kernel.add_grad_x(z0, refs.row(j), 1.0, &mut acc);
    }
    let scale = -2.0 / refs.len() as f64;
    acc.iter_mut().for_each(|v| *v *= scale);
    acc
}

/// `K[i, j] = k_p(p_i, p_j^(r))` between the batch prompts and the
/// reference prompts.
pub fn prompt_kernel_matrix(
    p: &Batch,
    q: &ReferenceSet,
    prompt_kernel: &KernelSpec,
) -> Result<Array2<f64>> {
    let kp = PromptKernel::resolve(prompt_kernel.prompt_part()?)?;
    let pp = p.prompts().ok_or(Error::MissingPrompts)?;
    let qp = q.batch().prompts().ok_or(Error::MissingPrompts)?;
    ensure_dim(pp.ncols(), qp.ncols())?;
    let mut out = Array2::<f64>::zeros((p.len(), q.len()));
    for i in 0..p.len() {
        let a = p.prompt(i).expect("prompts present");
        for j in 0..q.len() {
            out[[i, j]] = kp.eval(a, q.batch().prompt(j).expect("prompts present"));
        }
    }
    Ok(out)
}

fn check_product(p: &Batch, q: &ReferenceSet, k: &KernelSpec) -> Result<ProductParts> {
    ensure_dim(p.dim(), q.dim())?;
    if q.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let parts = ProductParts::resolve(k, p.dim())?;
    let pp = p.prompts().ok_or(Error::MissingPrompts)?;
    let qp = q.batch().prompts().ok_or(Error::MissingPrompts)?;
    ensure_dim(pp.ncols(), qp.ncols())?;
    Ok(parts)
}

/// Biased squared MMD in the joint (prompt, latent) space under a product
/// kernel.
pub fn mmd2_product(p: &Batch, q: &ReferenceSet, k: &KernelSpec) -> Result<f64> {
    let parts = check_product(p, q, k)?;
    let pp_prompts = p.prompts().expect("checked");
    let q_prompts = q.batch().prompts().expect("checked");
    let pp = weighted_mean(p, pp_prompts.view(), p, pp_prompts.view(), &parts, false);
    let qq = q.self_term_for(k)?;
    let pq = weighted_mean(
        p,
        pp_prompts.view(),
        q.batch(),
        q_prompts.view(),
        &parts,
        false,
    );
    Ok(pp + qq - 2.0 * pq)
}

/// Per-sample latent gradient of [`mmd2_product`] using a precomputed
/// `B x m` prompt-kernel matrix `k_ref`.
pub fn mmd2_product_grad(
    p: &Batch,
    q: &ReferenceSet,
    k: &KernelSpec,
    k_ref: &Array2<f64>,
) -> Result<Array2<f64>> {
    let parts = check_product(p, q, k)?;
    if k_ref.dim() != (p.len(), q.len()) {
        return Err(Error::InvalidParameter(format!(
            "prompt-kernel matrix has shape {:?}, expected ({}, {})",
            k_ref.dim(),
            p.len(),
            q.len()
        )));
    }
    let weights = PromptWeights {
        prompt: parts.prompt,
        batch_prompts: p,
        cross: k_ref.view(),
    };
    Ok(gradient_rows(p, q.batch(), &parts.latent, Some(&weights)))
}
