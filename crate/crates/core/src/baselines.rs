//! Training-free comparison samplers: classifier guidance with a linear
//! logistic classifier and classifier-free guidance over user components.

use serde::{Deserialize, Serialize};

use crate::diffusion::{cfg_eps, predict_z0, reverse_loop, Denoiser, RunContext};
use crate::error::{ensure_dim, Error, Result};
use crate::gmm::GmmSpec;
use crate::kernels::dot;
use crate::mmd::Batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^s)` without overflow.
fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

impl LinearClassifier {
    pub fn zeros(dim: usize) -> Self {
        LinearClassifier {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    /// `p(user | x)`.
    pub fn prob(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    /// `grad_x log p(user | x) = (1 - p) w`.
    pub fn grad_log_prob(&self, x: &[f64]) -> Vec<f64> {
        let c = 1.0 - self.prob(x);
        self.weights.iter().map(|w| c * w).collect()
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        -softplus(-self.logit(x))
    }
}

fn check_training_data(pos: &Batch, neg: &Batch) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyBatch);
    }
    ensure_dim(pos.dim(), neg.dim())?;
    let first = pos.row(0);
    let all_same =
        (0..pos.len()).all(|i| pos.row(i) == first) && (0..neg.len()).all(|i| neg.row(i) == first);
    if all_same {
        return Err(Error::Degenerate(
            "every training point is identical".into(),
        ));
    }
    Ok(())
}

/// Mean logistic loss with label 1 on `pos` and 0 on `neg`.
pub fn logistic_loss(clf: &LinearClassifier, pos: &Batch, neg: &Batch) -> f64 {
    let mut total = 0.0;
    for i in 0..pos.len() {
        total += softplus(-clf.logit(pos.row(i)));
    }
    for i in 0..neg.len() {
        total += softplus(clf.logit(neg.row(i)));
    }
    total / (pos.len() + neg.len()) as f64
}

/// Gradient of [`logistic_loss`] as `(d weights, d bias)`.
pub fn logistic_loss_grad(clf: &LinearClassifier, pos: &Batch, neg: &Batch) -> (Vec<f64>, f64) {
    let mut gw = vec![0.0; clf.weights.len()];
    let mut gb = 0.0;
    let mut add = |x: &[f64], label: f64| {
        let r = clf.prob(x) - label;
        for (g, v) in gw.iter_mut().zip(x) {
            *g += r * v;
        }
        gb += r;
    };
    for i in 0..pos.len() {
        add(pos.row(i), 1.0);
    }
    for i in 0..neg.len() {
        add(neg.row(i), 0.0);
    }
    let n = (pos.len() + neg.len()) as f64;
    gw.iter_mut().for_each(|g| *g /= n);
    (gw, gb / n)
}

/// Step size below which full-batch descent on the logistic loss cannot
/// increase it: `4 / mean(|x|^2 + 1)`.
pub fn safe_learning_rate(pos: &Batch, neg: &Batch) -> f64 {
    let mut total = 0.0;
    for b in [pos, neg] {
        for i in 0..b.len() {
            total += dot(b.row(i), b.row(i)) + 1.0;
        }
    }
    4.0 / (total / (pos.len() + neg.len()) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedClassifier {
    pub classifier: LinearClassifier,
    /// Loss before the first step and after each step.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent on the logistic loss from a zero start.
pub fn train_linear_classifier(
    pos: &Batch,
    neg: &Batch,
    steps: usize,
    lr: f64,
) -> Result<TrainedClassifier> {
    check_training_data(pos, neg)?;
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    let mut clf = LinearClassifier::zeros(pos.dim());
    let mut losses = Vec::with_capacity(steps + 1);
    losses.push(logistic_loss(&clf, pos, neg));
    for _ in 0..steps {
        let (gw, gb) = logistic_loss_grad(&clf, pos, neg);
        for (w, g) in clf.weights.iter_mut().zip(&gw) {
            *w -= lr * g;
        }
        clf.bias -= lr * gb;
        losses.push(logistic_loss(&clf, pos, neg));
    }
    Ok(TrainedClassifier {
        classifier: clf,
        losses,
    })
}

/// Classifier guidance: after each sampler step, adds
/// `scale * grad log p(user | z0_hat) / sqrt(abar_t)` with `z0_hat` the
/// clean-sample prediction at `z_t`.
pub fn cg_guided_sample(
    denoiser: &dyn Denoiser,
    clf: &LinearClassifier,
    n: usize,
    ctx: &RunContext<'_>,
    scale: f64,
) -> Result<Batch> {
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "guidance scale must be >= 0, got {scale}"
        )));
    }
    ensure_dim(denoiser.dim(), clf.weights.len())?;
    let eps = |_: usize, z: &[f64], t: usize, abar: f64| denoiser.eps(z, t, abar);
    let sched = ctx.sched;
    let z = reverse_loop(
        ctx,
        n,
        denoiser.dim(),
        &eps,
        &mut |t, z_t, eps_rows, next| {
            if scale == 0.0 {
                return Ok(());
            }
            let abar = sched.abar(t);
            let chain = scale / abar.sqrt();
            for (i, mut row) in next.rows_mut().into_iter().enumerate() {
                let zi = z_t.row(i);
                let z0_hat =
                    predict_z0(zi.as_slice().expect("standard layout"), &eps_rows[i], abar);
                let g = clf.grad_log_prob(&z0_hat);
                row.iter_mut().zip(g).for_each(|(v, gv)| *v += chain * gv);
            }
            Ok(())
        },
    )?;
    Batch::new(z)
}

/// Denoiser mixing the full-mixture and user-restricted predictions with
/// weight `w`.
pub struct CfgDenoiser<'a> {
    spec: &'a GmmSpec,
    user: GmmSpec,
    w: f64,
}

impl<'a> CfgDenoiser<'a> {
    pub fn new(spec: &'a GmmSpec, user_components: &[usize], w: f64) -> Result<Self> {
        if user_components.is_empty() {
            return Err(Error::InvalidParameter("empty component set".into()));
        }
        if !w.is_finite() {
            return Err(Error::InvalidParameter(
                "guidance weight must be finite".into(),
            ));
        }
        let mut sorted = user_components.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        Ok(CfgDenoiser {
            spec,
            user: spec.restrict(&sorted)?,
            w,
        })
    }
}

impl Denoiser for CfgDenoiser<'_> {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn eps(&self, z: &[f64], _t: usize, abar: f64) -> Result<Vec<f64>> {
        if self.w == 0.0 {
            return self.spec.eps_pred(z, abar);
        }
        let cond = self.user.eps_pred(z, abar)?;
        if self.w == 1.0 {
            return Ok(cond);
        }
        Ok(cfg_eps(&self.spec.eps_pred(z, abar)?, &cond, self.w))
    }
}

/// Classifier-free guidance towards the sub-mixture on `user_components`.
pub fn cfg_guided_sample(
    spec: &GmmSpec,
    user_components: &[usize],
    n: usize,
    ctx: &RunContext<'_>,
    w: f64,
) -> Result<Batch> {
    let denoiser = CfgDenoiser::new(spec, user_components, w)?;
    crate::diffusion::unguided_sample(&denoiser, n, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_linear_schedule, unguided_sample, SamplerKind};
    use crate::gmm::histogram;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn points(rows: &[&[f64]]) -> Batch {
        Batch::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn separable_1d() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos: Vec<Vec<f64>> = (0..50)
            .map(|_| vec![10.0 + rng.random_range(-1.0..1.0)])
            .collect();
        let neg: Vec<Vec<f64>> = (0..50)
            .map(|_| vec![-10.0 + rng.random_range(-1.0..1.0)])
            .collect();
        let (pos, neg) = (
            Batch::from_rows(&pos).unwrap(),
            Batch::from_rows(&neg).unwrap(),
        );
        let lr = safe_learning_rate(&pos, &neg);
        let fit = train_linear_classifier(&pos, &neg, 200, lr).unwrap();
        let clf = &fit.classifier;
        let correct = (0..50).filter(|&i| clf.prob(pos.row(i)) > 0.5).count()
            + (0..50).filter(|&i| clf.prob(neg.row(i)) < 0.5).count();
        assert_eq!(correct, 100);
        assert!(
            fit.losses.windows(2).all(|w| w[1] <= w[0]),
            "loss not monotone"
        );
    }

    #[test]
    fn identical_classes_give_flat_classifier() {
        let set = points(&[&[1.0, 2.0], &[-0.5, 0.3], &[2.0, -1.0]]);
        let fit = train_linear_classifier(&set, &set, 100, 0.1).unwrap();
        assert!(fit.classifier.weights.iter().all(|w| w.abs() < 1e-12));
        assert!((fit.classifier.prob(&[5.0, -3.0]) - 0.5).abs() < 1e-9);
        let one = points(&[&[1.0, 1.0]]);
        assert!(matches!(
            train_linear_classifier(&one, &one, 10, 0.1),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pos: Vec<Vec<f64>> = (0..20)
            .map(|_| vec![rng.random_range(-2.0..3.0), rng.random_range(-1.0..1.0)])
            .collect();
        let neg: Vec<Vec<f64>> = (0..15)
            .map(|_| vec![rng.random_range(-3.0..2.0), rng.random_range(-1.0..2.0)])
            .collect();
        let (pos, neg) = (
            Batch::from_rows(&pos).unwrap(),
            Batch::from_rows(&neg).unwrap(),
        );
        let h = 1e-6;
        for _ in 0..20 {
            let clf = LinearClassifier {
                weights: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                bias: rng.random_range(-1.0..1.0),
            };
            let (gw, gb) = logistic_loss_grad(&clf, &pos, &neg);
            let mut numeric = Vec::new();
            for c in 0..3 {
                let shift = |delta: f64| {
                    let mut c2 = clf.clone();
                    if c < 2 {
                        c2.weights[c] += delta;
                    } else {
                        c2.bias += delta;
                    }
                    logistic_loss(&c2, &pos, &neg)
                };
                numeric.push((shift(h) - shift(-h)) / (2.0 * h));
            }
            let analytic = [gw[0], gw[1], gb];
            for c in 0..3 {
                let rel = (numeric[c] - analytic[c]).abs() / analytic[c].abs().max(1e-3);
                assert!(rel < 1e-5, "{} vs {}", numeric[c], analytic[c]);
            }
        }
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let clf = LinearClassifier {
            weights: vec![0.7, -1.3, 0.2],
            bias: 0.4,
        };
        let x = [0.3, 0.5, -1.0];
        let g = clf.grad_log_prob(&x);
        let h = 1e-6;
        for c in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            let fd = (clf.log_prob(&xp) - clf.log_prob(&xm)) / (2.0 * h);
            assert!((fd - g[c]).abs() / g[c].abs() < 1e-5);
            assert_eq!(g[c], (1.0 - clf.prob(&x)) * clf.weights[c]);
        }
    }

    #[test]
    fn neutral_strengths_are_bitwise_unguided() {
        let world = GmmSpec::ring(8, 10.0, 2).unwrap();
        let s = make_linear_schedule(30, 5e-4, 0.1).unwrap();
        let ctx = RunContext::new(&s, SamplerKind::Ddpm, 4);
        let plain = unguided_sample(&world, 12, &ctx).unwrap();
        let clf = LinearClassifier {
            weights: vec![1.0, 0.5],
            bias: 0.0,
        };
        assert_eq!(
            cg_guided_sample(&world, &clf, 12, &ctx, 0.0).unwrap(),
            plain
        );
        assert_eq!(
            cfg_guided_sample(&world, &[0, 1], 12, &ctx, 0.0).unwrap(),
            plain
        );
        assert!(cg_guided_sample(&world, &clf, 12, &ctx, -1.0).is_err());
        assert!(cfg_guided_sample(&world, &[], 12, &ctx, 1.0).is_err());
    }

    #[test]
    fn cfg_weight_one_samples_user_mixture() {
        let world = GmmSpec::ring(8, 10.0, 2).unwrap();
        let user = [1, 4, 6];
        let s = make_linear_schedule(200, 5e-4, 0.1).unwrap();
        let ctx = RunContext::new(&s, SamplerKind::Ddpm, 6);
        let out = cfg_guided_sample(&world, &user, 10_000, &ctx, 1.0).unwrap();
        let hist = histogram(&world.assign_components(&out).unwrap(), 8);
        for (c, h) in hist.iter().enumerate() {
            let expected = if user.contains(&c) { 1.0 / 3.0 } else { 0.0 };
            assert!((h - expected).abs() < 0.02, "component {c}: {h}");
        }
    }

    fn per_component_variance(world: &GmmSpec, out: &Batch, c: usize) -> f64 {
        let labels = world.assign_components(out).unwrap();
        let rows: Vec<usize> = (0..out.len()).filter(|&i| labels[i] == c).collect();
        let sub = out.select(&rows).unwrap();
        (0..out.dim())
            .map(|k| sub.data().column(k).var(1.0))
            .sum::<f64>()
            / out.dim() as f64
    }

    #[test]
    fn cfg_overconcentrates_at_large_weight() {
        let world = GmmSpec::ring(8, 10.0, 2).unwrap();
        let s = make_linear_schedule(200, 5e-4, 0.1).unwrap();
        let ctx = RunContext::new(&s, SamplerKind::Ddpm, 7);
        let user = [2, 3];
        let w1 = cfg_guided_sample(&world, &user, 2000, &ctx, 1.0).unwrap();
        let w3 = cfg_guided_sample(&world, &user, 2000, &ctx, 3.0).unwrap();
        for c in user {
            assert!(
                per_component_variance(&world, &w3, c) < per_component_variance(&world, &w1, c)
            );
        }
    }

    #[test]
    fn classifier_guidance_raises_user_rate() {
        let world = GmmSpec::ring(8, 10.0, 2).unwrap();
        let user = 5;
        let s = make_linear_schedule(200, 5e-4, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pos = world
            .restrict(&[user])
            .unwrap()
            .sample(200, &mut rng)
            .unwrap();
        let neg =
            unguided_sample(&world, 200, &RunContext::new(&s, SamplerKind::Ddpm, 100)).unwrap();
        let fit = train_linear_classifier(&pos, &neg, 500, safe_learning_rate(&pos, &neg)).unwrap();
        let ctx = RunContext::new(&s, SamplerKind::Ddpm, 9);
        let rate = |b: &Batch| histogram(&world.assign_components(b).unwrap(), 8)[user];
        let plain = rate(&unguided_sample(&world, 1000, &ctx).unwrap());
        let guided = rate(&cg_guided_sample(&world, &fit.classifier, 1000, &ctx, 0.05).unwrap());
        assert!(guided > plain, "guided {guided} vs unguided {plain}");
    }
}
