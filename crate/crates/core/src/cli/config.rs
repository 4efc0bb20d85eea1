use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::concentration::GridConfig;
use crate::diffusion::{GuidanceConfig, LambdaSchedule, ReferenceMode, ScheduleParams};
use crate::error::{Error, Result};
use crate::gmm::{GmmSpec, PromptedGmm};
use crate::kernels::KernelSpec;
use crate::metrics::DEFAULT_KNN_K;

/// Mixture the generator samples from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorldSpec {
    Ring {
        components: usize,
        radius: f64,
        dim: usize,
    },
    Grid {
        side: usize,
        spacing: f64,
        dim: usize,
    },
    Mixture {
        spec: GmmSpec,
    },
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec::Ring {
            components: 8,
            radius: 10.0,
            dim: 2,
        }
    }
}

impl WorldSpec {
    pub fn build(&self) -> Result<GmmSpec> {
        match self {
            WorldSpec::Ring {
                components,
                radius,
                dim,
            } => GmmSpec::ring(*components, *radius, *dim),
            WorldSpec::Grid { side, spacing, dim } => GmmSpec::grid(*side, *spacing, *dim),
            WorldSpec::Mixture { spec } => {
                spec.validate()?;
                Ok(spec.clone())
            }
        }
    }
}

/// Prompt structure of the world for `prompt-match`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSettings {
    /// One embedding per world component; `None` gives component `k` the
    /// embedding `[k]`.
    pub embeddings: Option<Vec<Vec<f64>>>,
    /// Prompts to generate for; `None` uses the distinct prompts of the user
    /// components in order.
    pub queries: Option<Vec<Vec<f64>>>,
    pub queries_per_prompt: usize,
}

impl Default for PromptSettings {
    fn default() -> Self {
        PromptSettings {
            embeddings: None,
            queries: None,
            queries_per_prompt: 400,
        }
    }
}

impl PromptSettings {
    pub fn build(&self, base: GmmSpec) -> Result<PromptedGmm> {
        match &self.embeddings {
            Some(e) => PromptedGmm::new(base, e.clone()),
            None => PromptedGmm::indexed(base),
        }
    }
}

/// The user's reference data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UserSpec {
    /// World components the user data comes from.
    pub components: Vec<usize>,
    pub samples_per_component: usize,
    /// Explicit per-component counts, aligned with `components`.
    pub counts: Option<Vec<usize>>,
    /// Per-component proportions; counts are `total` split by largest
    /// remainder.
    pub weights: Option<Vec<f64>>,
    /// Proportions drawn from a Dirichlet with these parameters.
    pub dirichlet_alpha: Option<Vec<f64>>,
    pub total: Option<usize>,
    /// Replaces the world variance of the user components.
    pub variance: Option<f64>,
    /// CSV of reference rows; overrides generated references.
    pub reference_file: Option<PathBuf>,
}

impl Default for UserSpec {
    fn default() -> Self {
        UserSpec {
            components: vec![0, 1, 2, 3],
            samples_per_component: 50,
            counts: None,
            weights: None,
            dirichlet_alpha: None,
            total: None,
            variance: None,
            reference_file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Unguided sampling from the full world.
    None,
    Cg,
    Cfg,
}

impl Baseline {
    pub fn method_name(self) -> &'static str {
        match self {
            Baseline::None => "unguided",
            Baseline::Cg => "cg",
            Baseline::Cfg => "cfg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineParams {
    pub cg_scale: f64,
    pub cg_train_steps: usize,
    pub cfg_weight: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        BaselineParams {
            cg_scale: 0.05,
            cg_train_steps: 500,
            cfg_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalTarget {
    References,
    /// Fresh draws from the user mixture.
    UserDistribution {
        samples: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Evaluation {
    pub target: EvalTarget,
    pub knn_k: usize,
}

impl Default for Evaluation {
    fn default() -> Self {
        Evaluation {
            target: EvalTarget::UserDistribution { samples: 10_000 },
            knn_k: DEFAULT_KNN_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    /// Total reference counts, split evenly over the user components.
    pub counts: Vec<usize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            counts: vec![0, 5, 25, 50, 100, 150],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSpec {
    pub kernels: Vec<KernelSpec>,
    pub lambdas: Vec<f64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            kernels: vec![
                KernelSpec::rbf(0.5),
                KernelSpec::rbf(1.0),
                KernelSpec::rbf(2.0),
            ],
            lambdas: vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0, 2.0, 3.0, 5.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: WorldSpec,
    pub prompts: Option<PromptSettings>,
    pub user: UserSpec,
    pub schedule: ScheduleParams,
    pub guidance: GuidanceConfig,
    pub baselines: Vec<Baseline>,
    pub baseline_params: BaselineParams,
    pub evaluation: Evaluation,
    pub n_generate: usize,
    /// Samples guided jointly; the self term couples samples within a batch.
    pub batch_size: usize,
    pub seed: u64,
    /// When nonempty, `gmm-match` repeats over these seeds and reports
    /// mean and standard deviation.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub sweep: SweepSpec,
    pub ablation: AblationSpec,
    pub concentration: GridConfig,
}

fn default_guidance() -> GuidanceConfig {
    GuidanceConfig {
        reference_mode: ReferenceMode::NoisedAtT,
        ..GuidanceConfig::new(0.3, KernelSpec::rbf(1.0))
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldSpec::default(),
            prompts: None,
            user: UserSpec::default(),
            schedule: ScheduleParams::default(),
            guidance: default_guidance(),
            baselines: vec![Baseline::None],
            baseline_params: BaselineParams::default(),
            evaluation: Evaluation::default(),
            n_generate: 1000,
            batch_size: 1,
            seed: 0,
            seeds: Vec::new(),
            output_dir: PathBuf::from("out"),
            sweep: SweepSpec::default(),
            ablation: AblationSpec::default(),
            concentration: GridConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Defaults for `mode-reweight`: a 90/10 split over components 0 and 1.
    pub fn mode_reweight_default() -> Self {
        ExperimentConfig {
            user: UserSpec {
                components: vec![0, 1],
                weights: Some(vec![0.9, 0.1]),
                total: Some(100),
                ..UserSpec::default()
            },
            guidance: GuidanceConfig {
                lambda_schedule: LambdaSchedule::Constant { lambda: 0.25 },
                ..default_guidance()
            },
            ..ExperimentConfig::default()
        }
    }

    /// Defaults for `prompt-match`: indexed prompts, two user components
    /// with variance 0.25.
    pub fn prompt_match_default() -> Self {
        ExperimentConfig {
            prompts: Some(PromptSettings::default()),
            user: UserSpec {
                components: vec![1, 6],
                variance: Some(0.25),
                ..UserSpec::default()
            },
            guidance: GuidanceConfig {
                lambda_schedule: LambdaSchedule::SnrScaled { lambda0: 0.3 },
                ..GuidanceConfig {
                    reference_mode: ReferenceMode::NoisedAtT,
                    ..GuidanceConfig::new(
                        0.3,
                        KernelSpec::product(KernelSpec::PromptDelta, KernelSpec::rbf(1.0)),
                    )
                }
            },
            evaluation: Evaluation {
                target: EvalTarget::References,
                ..Evaluation::default()
            },
            ..ExperimentConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(file) = &cfg.user.reference_file {
            if file.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.user.reference_file = Some(dir.join(file));
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks the fields every sampling command relies on.
    pub fn validate(&self) -> Result<()> {
        let world = self.world.build()?;
        let k = world.components();
        let user = &self.user;
        if user.components.is_empty() {
            return Err(Error::InvalidParameter(
                "user needs at least one component".into(),
            ));
        }
        if let Some(&bad) = user.components.iter().find(|&&c| c >= k) {
            return Err(Error::InvalidParameter(format!(
                "user component {bad} not in a {k}-component world"
            )));
        }
        let mut seen = user.components.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != user.components.len() {
            return Err(Error::InvalidParameter(
                "user components must be distinct".into(),
            ));
        }
        let m = user.components.len();
        if let Some(c) = &user.counts {
            if c.len() != m {
                return Err(Error::InvalidParameter(
                    "counts must align with components".into(),
                ));
            }
        }
        if let Some(w) = &user.weights {
            if w.len() != m
                || w.iter().any(|v| !(v.is_finite() && *v >= 0.0))
                || w.iter().sum::<f64>() <= 0.0
            {
                return Err(Error::InvalidParameter(
                    "weights must align with components, be nonnegative and not all zero".into(),
                ));
            }
        }
        if let Some(a) = &user.dirichlet_alpha {
            if a.len() != m || a.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidParameter(
                    "dirichlet_alpha must align with components and be positive".into(),
                ));
            }
        }
        if let Some(v) = user.variance {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "user variance must be positive, got {v}"
                )));
            }
        }
        if let Some(f) = &user.reference_file {
            if !f.is_file() {
                return Err(Error::InvalidParameter(format!(
                    "reference file {} does not exist",
                    f.display()
                )));
            }
        }
        if self.n_generate == 0 {
            return Err(Error::InvalidParameter("n_generate must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if let EvalTarget::UserDistribution { samples } = self.evaluation.target {
            if samples < 2 {
                return Err(Error::InvalidParameter(
                    "evaluation needs at least 2 samples".into(),
                ));
            }
            if user.reference_file.is_some() {
                return Err(Error::InvalidParameter(
                    "a reference file has no user distribution; evaluate against references".into(),
                ));
            }
        }
        let p = &self.baseline_params;
        if !(p.cg_scale.is_finite() && p.cg_scale >= 0.0) || !p.cfg_weight.is_finite() {
            return Err(Error::InvalidParameter(
                "baseline parameters out of range".into(),
            ));
        }
        self.schedule.build()?;
        self.guidance.validate()
    }
}
