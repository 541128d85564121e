//! TOML run configuration. Every field is optional; omitted values take the
//! documented defaults and unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding::{Encoder, EncoderEnsemble, EncoderRegistry, EncoderSpec, LossWeights};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::hdn::HdnConfig;
use crate::optim::AdamConfig;
use crate::sampler::{HullSampleConfig, PromptVocabulary, DEFAULT_GAMMA};
use crate::trainer::{TrainingConfig, TrainingMode};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub training: TrainingSection,
    pub sampler: SamplerSection,
    pub output: OutputSection,
    pub hdn: HdnConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: String,
    pub embed_dim: usize,
    /// One ensemble member per seed.
    pub train_seeds: Vec<u64>,
    /// Held-out encoder used only by metrics.
    pub eval_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: "mock".into(),
            embed_dim: 64,
            train_seeds: vec![1, 2],
            eval_seed: 1001,
        }
    }
}

impl EncoderConfig {
    fn spec(&self, seed: u64) -> EncoderSpec {
        EncoderSpec {
            kind: self.kind.clone(),
            seed,
            embed_dim: self.embed_dim,
        }
    }

    pub fn ensemble(&self, registry: &EncoderRegistry) -> Result<EncoderEnsemble> {
        if self.train_seeds.contains(&self.eval_seed) {
            return Err(Error::Config(
                "the evaluation encoder must differ from the training encoders".into(),
            ));
        }
        let members = self
            .train_seeds
            .iter()
            .map(|&s| registry.build(&self.spec(s)))
            .collect::<Result<Vec<_>>>()?;
        EncoderEnsemble::new(members)
    }

    pub fn eval_encoder(&self, registry: &EncoderRegistry) -> Result<Arc<dyn Encoder>> {
        registry.build(&self.spec(self.eval_seed))
    }
}

/// Optional overrides of the per-mode training defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub weight_decay: Option<f64>,
    pub mixing_prob: Option<f64>,
    pub seed: Option<u64>,
    pub source_text: Option<String>,
    pub lambda_direction: Option<f64>,
    pub lambda_indomain: Option<f64>,
    pub lambda_tt: Option<f64>,
    pub lambda_norm: Option<f64>,
    pub lambda_clip_across: Option<f64>,
    pub group_size: Option<usize>,
    pub invert_steps: Option<usize>,
    pub invert_lr: Option<f64>,
    pub full_finetune: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    /// Resampling angle in radians.
    pub gamma: f64,
    /// Dirichlet concentration; defaults to `1 / batch_size`.
    pub beta: Option<f64>,
    /// Vocabulary file; the built-in lists are used when absent.
    pub vocabulary: Option<PathBuf>,
    /// Overrides the vocabulary's templates.
    pub templates: Option<Vec<String>>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            beta: None,
            vocabulary: None,
            templates: None,
        }
    }
}

impl SamplerSection {
    pub fn hull(&self, batch_size: usize) -> HullSampleConfig {
        match self.beta {
            Some(beta) => HullSampleConfig { beta },
            None => HullSampleConfig::for_batch(batch_size),
        }
    }

    pub fn vocabulary(&self) -> Result<PromptVocabulary> {
        let mut v = match &self.vocabulary {
            Some(p) => PromptVocabulary::load(p)?,
            None => PromptVocabulary::builtin(),
        };
        if let Some(t) = &self.templates {
            v.templates = t.clone();
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    /// Columns of emitted image grids.
    pub grid_cols: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            grid_cols: 4,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.hdn.validate()?;
        if self.hdn.embed_dim != self.encoder.embed_dim {
            return Err(Error::Config(format!(
                "hdn.embed_dim {} must equal encoder.embed_dim {}",
                self.hdn.embed_dim, self.encoder.embed_dim
            )));
        }
        if self.encoder.train_seeds.is_empty() {
            return Err(Error::Config("encoder.train_seeds must not be empty".into()));
        }
        if self.output.grid_cols == 0 {
            return Err(Error::Config("output.grid_cols must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies the overrides on top of the defaults for `mode`.
    pub fn training(&self, mode: TrainingMode) -> Result<TrainingConfig> {
        let t = &self.training;
        let base = TrainingConfig::defaults(mode);
        let w = base.weights;
        let weights = LossWeights {
            direction: t.lambda_direction.unwrap_or(w.direction),
            indomain: t.lambda_indomain.unwrap_or(w.indomain),
            tt_direction: t.lambda_tt.unwrap_or(w.tt_direction),
            domain_norm: t.lambda_norm.unwrap_or(w.domain_norm),
            clip_across: t.lambda_clip_across.unwrap_or(w.clip_across),
            ..w
        };
        let adam = AdamConfig {
            lr: t.lr.unwrap_or(base.adam.lr),
            beta1: t.beta1.unwrap_or(base.adam.beta1),
            beta2: t.beta2.unwrap_or(base.adam.beta2),
            eps: base.adam.eps,
            weight_decay: t.weight_decay.unwrap_or(base.adam.weight_decay),
        };
        let cfg = TrainingConfig {
            mode,
            iterations: t.iterations.unwrap_or(base.iterations),
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            weights,
            adam,
            mixing_prob: t.mixing_prob.unwrap_or(base.mixing_prob),
            seed: t.seed.unwrap_or(base.seed),
            source_text: t.source_text.clone().unwrap_or(base.source_text),
            group_size: t.group_size.unwrap_or(base.group_size),
            invert_steps: t.invert_steps.unwrap_or(base.invert_steps),
            invert_lr: t.invert_lr.unwrap_or(base.invert_lr),
            full_finetune: t.full_finetune.unwrap_or(base.full_finetune),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with every training and sampler default written out for `mode`,
    /// suitable for echoing into a checkpoint.
    pub fn resolved(&self, mode: TrainingMode) -> Result<Self> {
        let t = self.training(mode)?;
        let mut out = self.clone();
        out.training = TrainingSection {
            iterations: Some(t.iterations),
            batch_size: Some(t.batch_size),
            lr: Some(t.adam.lr),
            beta1: Some(t.adam.beta1),
            beta2: Some(t.adam.beta2),
            weight_decay: Some(t.adam.weight_decay),
            mixing_prob: Some(t.mixing_prob),
            seed: Some(t.seed),
            source_text: Some(t.source_text),
            lambda_direction: Some(t.weights.direction),
            lambda_indomain: Some(t.weights.indomain),
            lambda_tt: Some(t.weights.tt_direction),
            lambda_norm: Some(t.weights.domain_norm),
            lambda_clip_across: Some(t.weights.clip_across),
            group_size: Some(t.group_size),
            invert_steps: Some(t.invert_steps),
            invert_lr: Some(t.invert_lr),
            full_finetune: Some(t.full_finetune),
        };
        out.sampler.beta = Some(out.sampler.hull(t.batch_size).beta);
        Ok(out)
    }
}
