//! Training loops: single-domain text adaptation, one-shot image adaptation,
//! and multi-domain hypernetwork training, plus loss bookkeeping.

pub mod checkpoint;
mod hdn;
mod objective;
mod single;

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, EncoderEnsemble, LossWeights};
use crate::error::{shape_err, Error, Result};
use crate::generator::{style_mix, Generator, Image, Styles};
use crate::optim::AdamConfig;

pub use hdn::{train_hdn, train_hdn_from, HdnBatch, HdnDomains, HdnObjective, HdnTerms, HdnTraining};
pub use objective::{DirectionObjective, DirectionTerms, ObjectiveGrad, SampledBatch};
pub use single::{adapt_one_shot, adapt_single_domain_text, naive_invert, Adaptation, Inversion, OneShotAdaptation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    Text,
    OneShot,
    HdnFixed,
    HdnOpen,
}

impl TrainingMode {
    pub fn is_hdn(self) -> bool {
        matches!(self, Self::HdnFixed | Self::HdnOpen)
    }
}

/// Fully resolved settings of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub mode: TrainingMode,
    pub iterations: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub mixing_prob: f64,
    pub seed: u64,
    /// Source-domain description used when a descriptor carries none.
    pub source_text: String,
    /// Hypernetwork runs share one latent per group of this many batch
    /// elements; zero picks `min(domains, batch_size)` in fixed mode.
    pub group_size: usize,
    pub invert_steps: usize,
    pub invert_lr: f64,
    /// Train the synthesis weights instead of a domain vector.
    pub full_finetune: bool,
}

impl TrainingConfig {
    pub fn defaults(mode: TrainingMode) -> Self {
        let base = Self {
            mode,
            iterations: 600,
            batch_size: 4,
            weights: LossWeights::text_defaults(),
            adam: AdamConfig::domain_vector(),
            mixing_prob: 0.9,
            seed: 0,
            source_text: "Photo".to_string(),
            group_size: 0,
            invert_steps: 200,
            invert_lr: 0.05,
            full_finetune: false,
        };
        match mode {
            TrainingMode::Text => base,
            TrainingMode::OneShot => Self {
                weights: LossWeights::one_shot_defaults(),
                ..base
            },
            TrainingMode::HdnFixed => Self {
                iterations: 1000,
                batch_size: 24,
                weights: LossWeights::hdn_defaults(),
                adam: AdamConfig::hypernetwork(),
                ..base
            },
            TrainingMode::HdnOpen => Self {
                iterations: 10000,
                batch_size: 96,
                weights: LossWeights::hdn_defaults(),
                adam: AdamConfig::hypernetwork(),
                group_size: 4,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.weights.indomain > 0.0 && self.batch_size < 2 {
            return Err(Error::Config("the indomain-angle loss needs batch_size >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.mixing_prob) {
            return Err(Error::Config("mixing_prob must lie in [0, 1]".into()));
        }
        if self.full_finetune && self.mode.is_hdn() {
            return Err(Error::Config(
                "full fine-tuning applies to single-domain modes only".into(),
            ));
        }
        if self.source_text.trim().is_empty() {
            return Err(Error::Config("source_text must be non-empty".into()));
        }
        if !(self.invert_lr.is_finite() && self.invert_lr >= 0.0) {
            return Err(Error::Config("invert_lr must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-iteration values of every loss term; the last column is the weighted
/// total.
#[derive(Clone, Debug, PartialEq)]
pub struct LossHistory {
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl LossHistory {
    pub fn new(terms: &[&str]) -> Self {
        let mut columns: Vec<String> = terms.iter().map(|s| s.to_string()).collect();
        columns.push("total".into());
        Self {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(shape_err("history row does not match its columns"));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| *r.last().unwrap()).collect()
    }

    /// Mean total over iterations `start..start + window`, clipped to the
    /// recorded range.
    pub fn moving_average(&self, start: usize, window: usize) -> Option<f64> {
        let t = self.totals();
        let end = (start + window).min(t.len());
        (start < end).then(|| t[start..end].iter().sum::<f64>() / (end - start) as f64)
    }

    /// Mean total over the last `window` iterations.
    pub fn trailing_average(&self, window: usize) -> Option<f64> {
        let n = self.len();
        self.moving_average(n.saturating_sub(window), window)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Draws `n` style-mixed latents and their per-layer styles.
pub(crate) fn sample_styles<R: Rng + ?Sized>(
    gen: &Generator,
    n: usize,
    mixing_prob: f64,
    rng: &mut R,
) -> Result<Vec<Styles>> {
    (0..n)
        .map(|_| {
            let w1 = gen.mapping_forward(&gen.sample_z(rng))?;
            let w2 = gen.mapping_forward(&gen.sample_z(rng))?;
            let wplus = style_mix(&w1, &w2, gen.num_ws(), mixing_prob, rng)?;
            gen.styles(&wplus)
        })
        .collect()
}

/// Image embedding under every ensemble member.
pub(crate) fn encode_members(ens: &EncoderEnsemble, image: &Image) -> Result<Vec<Embedding>> {
    ens.encode_image_all(image.view())
}

/// `Σ_k J_kᵀ g_k` over ensemble members.
pub(crate) fn pixel_grad(ens: &EncoderEnsemble, image: &Image, grads: &[Vec<f64>]) -> Result<Image> {
    let mut out = Image::zeros(image.dim());
    for (enc, g) in ens.members().iter().zip(grads) {
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        out += &enc.image_vjp(image.view(), g)?;
    }
    Ok(out)
}

pub(crate) fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(y, v)| *y += a * v);
}
