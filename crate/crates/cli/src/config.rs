//! The single JSON run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use unshadow_core::dataset::{AugmentConfig, DatasetConfig, ShadowGtConfig};
use unshadow_core::inpaint::DiffusionFill;
use unshadow_core::render::proxy::{DepthNoiseConfig, PerturbConfig};
use unshadow_core::render::RenderConfig;
use unshadow_core::scene::SceneConfig;
use unshadow_core::util::config_hash;
use unshadow_nn::adam::AdamConfig;
use unshadow_nn::losses::LossWeights;
use unshadow_nn::pipeline::ModelConfig;
use unshadow_nn::train::{Stage, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenegen: SceneConfig,
    pub render: RenderConfig,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub loss: LossWeights,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub noise: DepthNoiseConfig,
    pub perturb: PerturbConfig,
    pub shadow: ShadowGtConfig,
    pub augment: AugmentConfig,
    pub depth_tolerance: f32,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        DatasetSection {
            noise: d.noise,
            perturb: d.perturb,
            shadow: d.shadow,
            augment: d.augment,
            depth_tolerance: d.depth_tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintSection {
    pub max_iterations: usize,
    pub tolerance: f32,
    pub relaxation: f32,
}

impl Default for InpaintSection {
    fn default() -> Self {
        let d = DiffusionFill::default();
        InpaintSection {
            max_iterations: d.max_iterations,
            tolerance: d.tolerance,
            relaxation: d.relaxation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub levels: usize,
    pub base_channels: usize,
    pub seed: u64,
    /// Texture inpainting operator used inside the pipeline and by baselines.
    pub inpaint: InpaintSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            levels: m.levels,
            base_channels: m.base_channels,
            seed: m.seed,
            inpaint: InpaintSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub stage: Stage,
    pub epochs: usize,
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub resolution: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Color augmentation with the dataset section's ranges.
    pub augment: bool,
    pub max_steps: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            stage: t.stage,
            epochs: t.epochs,
            lr0: t.lr0,
            decay: t.decay,
            decay_every: t.decay_every,
            batch_size: t.batch_size,
            resolution: t.resolution,
            seed: t.seed,
            adam: t.adam,
            augment: t.augment.is_some(),
            max_steps: t.max_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Methods evaluated when `--methods` is not given.
    pub methods: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            methods: ["no-op", "inpaint", "inpaint+shadow", "pipeline"].map(String::from).to_vec(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let d = &self.dataset;
        DatasetConfig {
            render: self.render.clone(),
            noise: d.noise.clone(),
            perturb: d.perturb.clone(),
            shadow: d.shadow.clone(),
            augment: d.augment.clone(),
            depth_tolerance: d.depth_tolerance,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            levels: self.model.levels,
            base_channels: self.model.base_channels,
            seed: self.model.seed,
        }
    }

    pub fn inpaint(&self) -> DiffusionFill {
        let i = &self.model.inpaint;
        DiffusionFill {
            max_iterations: i.max_iterations,
            tolerance: i.tolerance,
            relaxation: i.relaxation,
        }
    }

    pub fn train_config(&self, stage: Option<Stage>) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            stage: stage.unwrap_or(t.stage),
            epochs: t.epochs,
            lr0: t.lr0,
            decay: t.decay,
            decay_every: t.decay_every,
            batch_size: t.batch_size,
            resolution: t.resolution,
            seed: t.seed,
            weights: self.loss.clone(),
            adam: t.adam.clone(),
            augment: t.augment.then(|| self.dataset.augment.clone()),
            shadow: self.dataset.shadow.clone(),
            max_steps: t.max_steps,
        }
    }
}
