//! Sample-set comparison metrics: Fréchet distance, kernel distance and
//! k-NN density/coverage.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::kernels::{sq_dist, KernelSpec, LatentKernel};
use crate::mmd::{mean_kernel, mmd2_unbiased, Batch, ReferenceSet};

pub const DEFAULT_KNN_K: usize = 5;
const COV_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fd: f64,
    pub kd: f64,
    pub density: f64,
    pub coverage: f64,
    pub n_gen: usize,
    pub n_ref: usize,
    pub knn_k: usize,
}

fn moments(batch: &Batch) -> (DVector<f64>, DMatrix<f64>) {
    let n = batch.len();
    let d = batch.dim();
    let mut mean = DVector::<f64>::zeros(d);
    for i in 0..n {
        for (c, v) in batch.row(i).iter().enumerate() {
            mean[c] += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        let row = batch.row(i);
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// FD before clamping at zero.
pub fn frechet_distance_raw(a: &Batch, b: &Batch) -> Result<f64> {
    ensure_dim(a.dim(), b.dim())?;
    for n in [a.len(), b.len()] {
        if n < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: n });
        }
    }
    let d = a.dim();
    let (mu_a, mut cov_a) = moments(a);
    let (mu_b, mut cov_b) = moments(b);
    if a.len().min(b.len()) < 2 * d {
        for i in 0..d {
            cov_a[(i, i)] += COV_RIDGE;
            cov_b[(i, i)] += COV_RIDGE;
        }
    }
    let s = psd_sqrt(&cov_a);
    let inner = &s * &cov_b * &s;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = inner
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let diff = &mu_a - &mu_b;
    Ok(diff.norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt)
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})` on empirical moments.
pub fn frechet_distance(a: &Batch, b: &Batch) -> Result<f64> {
    Ok(frechet_distance_raw(a, b)?.max(0.0))
}

/// Cubic polynomial kernel `(x.y / d + 1)^3`.
pub fn kid_kernel() -> KernelSpec {
    KernelSpec::Polynomial {
        degree: 3,
        offset: 1.0,
        scale: None,
    }
}

/// Unbiased squared MMD under [`kid_kernel`]; not clamped.
pub fn kernel_distance(a: &Batch, b: &Batch) -> Result<f64> {
    ensure_dim(a.dim(), b.dim())?;
    mmd2_unbiased(a, &ReferenceSet::new(b.clone()), &kid_kernel())
}

/// Squared distance from each reference point to its `k`-th nearest other
/// reference point.
fn knn_radii_sq(reference: &Batch, k: usize) -> Vec<f64> {
    (0..reference.len())
        .into_par_iter()
        .map(|j| {
            let mut d: Vec<f64> = (0..reference.len())
                .filter(|&l| l != j)
                .map(|l| sq_dist(reference.row(j), reference.row(l)))
                .collect();
            d.select_nth_unstable_by(k - 1, |x, y| x.total_cmp(y));
            d[k - 1]
        })
        .collect()
}

fn check_knn(gen: &Batch, reference: &Batch, k: usize) -> Result<()> {
    ensure_dim(reference.dim(), gen.dim())?;
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    for n in [gen.len(), reference.len()] {
        if n <= k {
            return Err(Error::TooFewSamples {
                needed: k + 1,
                got: n,
            });
        }
    }
    Ok(())
}

fn density_coverage_with(gen: &Batch, reference: &Batch, radii: &[f64], k: usize) -> (f64, f64) {
    let inside: Vec<usize> = (0..gen.len())
        .into_par_iter()
        .map(|i| {
            (0..reference.len())
                .filter(|&j| sq_dist(gen.row(i), reference.row(j)) <= radii[j])
                .count()
        })
        .collect();
    let covered = (0..reference.len())
        .into_par_iter()
        .filter(|&j| (0..gen.len()).any(|i| sq_dist(gen.row(i), reference.row(j)) <= radii[j]))
        .count();
    let density = inside.iter().sum::<usize>() as f64 / (k * gen.len()) as f64;
    let coverage = covered as f64 / reference.len() as f64;
    (density, coverage)
}

/// `(density, coverage)` with k-NN balls around the reference points.
pub fn density_coverage(gen: &Batch, reference: &Batch, k: usize) -> Result<(f64, f64)> {
    check_knn(gen, reference, k)?;
    Ok(density_coverage_with(
        gen,
        reference,
        &knn_radii_sq(reference, k),
        k,
    ))
}

pub fn metrics_report(gen: &Batch, reference: &Batch, k: usize) -> Result<MetricsReport> {
    let (density, coverage) = density_coverage(gen, reference, k)?;
    Ok(MetricsReport {
        fd: frechet_distance(gen, reference)?,
        kd: kernel_distance(gen, reference)?,
        density,
        coverage,
        n_gen: gen.len(),
        n_ref: reference.len(),
        knn_k: k,
    })
}

/// A reference set with its k-NN radii and kernel self term precomputed,
/// for scoring several generated sets against it.
#[derive(Debug, Clone)]
pub struct MetricsTarget {
    reference: Batch,
    k: usize,
    radii: Vec<f64>,
    kid_self: f64,
}

impl MetricsTarget {
    pub fn new(reference: Batch, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        if reference.len() <= k {
            return Err(Error::TooFewSamples {
                needed: k + 1,
                got: reference.len(),
            });
        }
        let kernel = LatentKernel::resolve(&kid_kernel(), reference.dim())?;
        Ok(MetricsTarget {
            radii: knn_radii_sq(&reference, k),
            kid_self: mean_kernel(&reference, &reference, &kernel, true),
            reference,
            k,
        })
    }

    pub fn reference(&self) -> &Batch {
        &self.reference
    }

    /// Same values as [`metrics_report`] against the stored reference.
    pub fn report(&self, gen: &Batch) -> Result<MetricsReport> {
        check_knn(gen, &self.reference, self.k)?;
        if gen.len() < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                got: gen.len(),
            });
        }
        let kernel = LatentKernel::resolve(&kid_kernel(), gen.dim())?;
        let pp = mean_kernel(gen, gen, &kernel, true);
        let pq = mean_kernel(gen, &self.reference, &kernel, false);
        let (density, coverage) = density_coverage_with(gen, &self.reference, &self.radii, self.k);
        Ok(MetricsReport {
            fd: frechet_distance(gen, &self.reference)?,
            kd: pp + self.kid_self - 2.0 * pq,
            density,
            coverage,
            n_gen: gen.len(),
            n_ref: self.reference.len(),
            knn_k: self.k,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::GmmSpec;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, mean: &[f64], sd: f64, rng: &mut ChaCha8Rng) -> Batch {
        let d = mean.len();
        let data = Array2::from_shape_fn((n, d), |(_, c)| {
            let e: f64 = rng.sample(StandardNormal);
            mean[c] + sd * e
        });
        Batch::new(data).unwrap()
    }

    #[test]
    fn prepared_target_matches_direct_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let reference = gaussian(300, &[0.0, 1.0, -1.0], 1.0, &mut rng);
        let target = MetricsTarget::new(reference.clone(), 5).unwrap();
        for shift in [0.0, 0.5, 2.0] {
            let gen = gaussian(120, &[shift, 1.0, -1.0], 1.2, &mut rng);
            assert_eq!(
                target.report(&gen).unwrap(),
                metrics_report(&gen, &reference, 5).unwrap()
            );
        }
        assert!(target
            .report(&gaussian(5, &[0.0; 3], 1.0, &mut rng))
            .is_err());
        assert!(target
            .report(&gaussian(50, &[0.0; 2], 1.0, &mut rng))
            .is_err());
        assert!(MetricsTarget::new(gaussian(5, &[0.0; 3], 1.0, &mut rng), 5).is_err());
    }

    #[test]
    fn fd_identity_and_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = gaussian(500, &[0.0; 4], 1.0, &mut rng);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-8);

        let n = 10_000;
        let a = gaussian(n, &[0.0; 10], 1.0, &mut rng);
        let shifted = {
            let mut m = vec![0.0; 10];
            m[0] = 2.0;
            m
        };
        let b = gaussian(n, &shifted, 1.0, &mut rng);
        let fd = frechet_distance(&a, &b).unwrap();
        assert!((fd - 4.0).abs() < 0.2, "{fd}");

        let wide = gaussian(n, &[0.0; 10], 2.0, &mut rng);
        let fd = frechet_distance(&a, &wide).unwrap();
        assert!((fd - 10.0).abs() < 0.5, "{fd}");
    }

    #[test]
    fn fd_symmetry_and_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let d = rng.random_range(1..6);
            let na = rng.random_range(2..40);
            let nb = rng.random_range(2..40);
            let a = gaussian(na, &vec![0.3; d], 1.0, &mut rng);
            let b = gaussian(nb, &vec![-0.2; d], 1.5, &mut rng);
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
            assert!(frechet_distance_raw(&a, &a).unwrap() > -1e-6);
        }
        let one = Batch::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            frechet_distance(&one, &one),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn fd_small_sample_regularization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian(20, &[0.0; 50], 1.0, &mut rng);
        let b = gaussian(30, &[0.0; 50], 1.0, &mut rng);
        let fd = frechet_distance(&a, &b).unwrap();
        assert!(fd.is_finite() && fd >= 0.0);
    }

    // E[(g x.y + 1)^3] for independent x ~ N(a, I), y ~ N(b, I), from the
    // cumulants of the coordinate-wise products.
    fn poly3_expectation(a: &[f64], b: &[f64], gamma: f64) -> f64 {
        let (mut k1, mut k2, mut k3) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            let m1 = x * y;
            let m2 = (x * x + 1.0) * (y * y + 1.0);
            let m3 = (x.powi(3) + 3.0 * x) * (y.powi(3) + 3.0 * y);
            k1 += m1;
            k2 += m2 - m1 * m1;
            k3 += m3 - 3.0 * m2 * m1 + 2.0 * m1.powi(3);
        }
        let s1 = k1;
        let s2 = k2 + k1 * k1;
        let s3 = k3 + 3.0 * k2 * k1 + k1.powi(3);
        1.0 + 3.0 * gamma * s1 + 3.0 * gamma * gamma * s2 + gamma.powi(3) * s3
    }

    #[test]
    fn kd_matches_gaussian_moment_oracle() {
        let d = 3;
        let gamma = 1.0 / d as f64;
        let mu_a = vec![0.0; d];
        let mu_b = vec![1.0, -0.5, 0.5];
        let expected = poly3_expectation(&mu_a, &mu_a, gamma)
            + poly3_expectation(&mu_b, &mu_b, gamma)
            - 2.0 * poly3_expectation(&mu_a, &mu_b, gamma);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reps = 40;
        let values: Vec<f64> = (0..reps)
            .map(|_| {
                let a = gaussian(300, &mu_a, 1.0, &mut rng);
                let b = gaussian(300, &mu_b, 1.0, &mut rng);
                kernel_distance(&a, &b).unwrap()
            })
            .collect();
        let mean = values.iter().sum::<f64>() / reps as f64;
        let sd =
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let se = sd / (reps as f64).sqrt();
        assert!(
            (mean - expected).abs() < 3.0 * se,
            "{mean} vs {expected} (se {se})"
        );
    }

    #[test]
    fn kd_unbiased_and_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reps = 100;
        let values: Vec<f64> = (0..reps)
            .map(|_| {
                let a = gaussian(50, &[0.0; 2], 1.0, &mut rng);
                let b = gaussian(50, &[0.0; 2], 1.0, &mut rng);
                kernel_distance(&a, &b).unwrap()
            })
            .collect();
        let mean = values.iter().sum::<f64>() / reps as f64;
        let sd =
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        assert!(mean.abs() < 3.0 * sd / (reps as f64).sqrt(), "{mean}");

        let a = gaussian(30, &[0.0; 2], 1.0, &mut rng);
        assert!(kernel_distance(&a, &a).unwrap() <= 0.0);
        let one = Batch::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(kernel_distance(&one, &a).is_err());
    }

    fn brute_density_coverage(gen: &Batch, reference: &Batch, k: usize) -> (f64, f64) {
        let m = reference.len();
        let mut radii = vec![0.0; m];
        for j in 0..m {
            let mut d = Vec::new();
            for l in 0..m {
                if l != j {
                    d.push(sq_dist(reference.row(j), reference.row(l)));
                }
            }
            d.sort_by(|x, y| x.partial_cmp(y).unwrap());
            radii[j] = d[k - 1];
        }
        let mut inside = 0usize;
        let mut covered = vec![false; m];
        for i in 0..gen.len() {
            for j in 0..m {
                if sq_dist(gen.row(i), reference.row(j)) <= radii[j] {
                    inside += 1;
                    covered[j] = true;
                }
            }
        }
        (
            inside as f64 / (k * gen.len()) as f64,
            covered.iter().filter(|c| **c).count() as f64 / m as f64,
        )
    }

    #[test]
    fn density_coverage_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let reference = gaussian(10, &[0.0; 2], 1.0, &mut rng);
        let (d_self, c_self) = density_coverage(&reference, &reference, 3).unwrap();
        assert_eq!(c_self, 1.0);
        assert_eq!(
            (d_self, c_self),
            brute_density_coverage(&reference, &reference, 3)
        );

        let doubled = reference.concat(&reference).unwrap();
        let (d_double, c_double) = density_coverage(&doubled, &reference, 3).unwrap();
        assert_eq!(c_double, 1.0);
        assert!((d_double - d_self).abs() < 1e-15);
        let in_ball_self = d_self * (3 * reference.len()) as f64;
        let in_ball_double = d_double * (3 * doubled.len()) as f64;
        assert!((in_ball_double - 2.0 * in_ball_self).abs() < 1e-9);
        assert_eq!(
            brute_density_coverage(&doubled, &reference, 3),
            (d_double, c_double)
        );

        let far = gaussian(10, &[1e3, 1e3], 1.0, &mut rng);
        assert_eq!(density_coverage(&far, &reference, 3).unwrap(), (0.0, 0.0));
        assert!(density_coverage(&reference, &reference, 10).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn density_coverage_matches_brute_force(seed in 0u64..10_000, ng in 4usize..50, nr in 4usize..50, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gen = gaussian(ng, &[0.5, 0.0], 1.2, &mut rng);
            let reference = gaussian(nr, &[0.0, 0.0], 1.0, &mut rng);
            prop_assert_eq!(density_coverage(&gen, &reference, k).unwrap(), brute_density_coverage(&gen, &reference, k));
        }

        #[test]
        fn kd_is_permutation_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gaussian(12, &[0.0, 0.0], 1.0, &mut rng);
            let b = gaussian(9, &[1.0, 0.0], 1.0, &mut rng);
            let pa: Vec<usize> = (0..12).rev().collect();
            let pb: Vec<usize> = (0..9).map(|i| (i * 4) % 9).collect();
            let base = kernel_distance(&a, &b).unwrap();
            let permuted = kernel_distance(&a.select(&pa).unwrap(), &b.select(&pb).unwrap()).unwrap();
            prop_assert!((base - permuted).abs() <= 1e-12 * base.abs().max(1.0));
        }
    }

    #[test]
    fn report_json_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = GmmSpec::ring(8, 10.0, 2).unwrap();
        let a = spec.sample(40, &mut rng).unwrap();
        let b = spec.sample(40, &mut rng).unwrap();
        let report = metrics_report(&a, &b, DEFAULT_KNN_K).unwrap();
        let value = serde_json::to_value(&report).unwrap();
        let mut keys: Vec<&str> = value
            .as_object()
            .unwrap()
            .keys()
            .map(|k| k.as_str())
            .collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            ["coverage", "density", "fd", "kd", "knn_k", "n_gen", "n_ref"]
        );
        assert!((0.0..=1.0).contains(&report.coverage) && report.density >= 0.0);
    }
}
