use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::losses::sub;
use crate::embedding::{text_direction, DomainDescriptor, DomainPayload, EncoderEnsemble};
use crate::error::{shape_err, Error, Result};
use crate::generator::{DomainVector, Generator, Image, WPlus};
use crate::optim::{AdamConfig, AdamState};

use super::objective::DirectionObjective;
use super::{encode_members, pixel_grad, LossHistory, TrainingConfig, TrainingMode};

/// Result of a single-domain run.
#[derive(Clone, Debug)]
pub struct Adaptation {
    /// Trained domain vector; all-ones in full fine-tuning.
    pub domain: DomainVector,
    /// Fine-tuned copy of the generator when `full_finetune` is set.
    pub generator: Option<Generator>,
    pub history: LossHistory,
}

#[derive(Clone, Debug)]
pub struct OneShotAdaptation {
    pub adaptation: Adaptation,
    /// The source-domain counterpart of the style image that was used.
    pub projection: Image,
}

#[derive(Clone, Debug)]
pub struct Inversion {
    pub w: Vec<f64>,
    /// Mean squared embedding distance before each step, then after the last.
    pub history: Vec<f64>,
}

const INVERT_INIT_SAMPLES: usize = 1000;

fn mode_check(cfg: &TrainingConfig, mode: TrainingMode) -> Result<()> {
    cfg.validate()?;
    if cfg.mode != mode {
        return Err(Error::Config(format!("expected a {mode:?} config, got {:?}", cfg.mode)));
    }
    Ok(())
}

/// Adapts the source generator to a text-described domain by optimizing a
/// domain vector only.
pub fn adapt_single_domain_text(
    source: &Generator,
    ens: &EncoderEnsemble,
    target: &DomainDescriptor,
    cfg: &TrainingConfig,
) -> Result<Adaptation> {
    mode_check(cfg, TrainingMode::Text)?;
    let source_text = target.source_text.as_deref().unwrap_or(&cfg.source_text);
    let refs = match &target.payload {
        DomainPayload::Text(t) => ens
            .members()
            .iter()
            .map(|enc| text_direction(enc.as_ref(), t, source_text))
            .collect::<Result<Vec<_>>>()?,
        DomainPayload::Embedding(e) => {
            if ens.len() != 1 {
                return Err(Error::Input(
                    "a precomputed target embedding needs a single-encoder ensemble".into(),
                ));
            }
            let s = ens.members()[0].encode_text(source_text)?;
            vec![sub(e.as_slice(), s.as_slice())]
        }
        DomainPayload::Image(_) => {
            return Err(Error::Input("image targets are handled by one-shot adaptation".into()));
        }
    };
    let objective = DirectionObjective::new(source, ens, refs, cfg.weights.direction, cfg.weights.indomain)?;
    optimize(source, &objective, cfg, &["direction", "indomain"])
}

/// Adapts to the domain of one style image. Without `projection`, the source
/// counterpart is found by [`naive_invert`].
pub fn adapt_one_shot(
    source: &Generator,
    ens: &EncoderEnsemble,
    style_image: &Image,
    projection: Option<&Image>,
    cfg: &TrainingConfig,
) -> Result<OneShotAdaptation> {
    mode_check(cfg, TrainingMode::OneShot)?;
    let projection = match projection {
        Some(p) => p.clone(),
        None => {
            let inv = naive_invert(source, ens, style_image, cfg.invert_steps, cfg.invert_lr, cfg.seed)?;
            source.synthesize_w(&inv.w, None)?
        }
    };
    let refs = ens
        .members()
        .iter()
        .map(|enc| crate::embedding::projection_direction(enc.as_ref(), style_image.view(), projection.view()))
        .collect::<Result<Vec<_>>>()?;
    let objective = DirectionObjective::new(source, ens, refs, cfg.weights.clip_across, cfg.weights.indomain)?;
    let adaptation = optimize(source, &objective, cfg, &["clip_across", "indomain"])?;
    Ok(OneShotAdaptation { adaptation, projection })
}

fn optimize(
    source: &Generator,
    objective: &DirectionObjective<'_>,
    cfg: &TrainingConfig,
    terms: &[&str],
) -> Result<Adaptation> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = LossHistory::new(terms);
    let mut domain = DomainVector::ones(source.layout());
    let mut tuned = cfg.full_finetune.then(|| source.clone());
    let mut params = match &tuned {
        Some(g) => g.synthesis_flat(),
        None => domain.values().to_vec(),
    };
    let mut adam = AdamState::new(cfg.adam, params.len())?;
    for _ in 0..cfg.iterations {
        let batch = objective.sample_batch(cfg.batch_size, cfg.mixing_prob, &mut rng)?;
        let (t, grad) = match &tuned {
            Some(g) => {
                let (t, grad) = objective.gradient(g, None, &batch, true)?;
                (t, grad.weights.expect("requested"))
            }
            None => {
                let (t, grad) = objective.gradient(source, Some(&domain), &batch, false)?;
                (t, grad.domain)
            }
        };
        history.push(vec![t.direction, t.indomain, t.total])?;
        adam.step(&mut params, &grad)?;
        match tuned.as_mut() {
            Some(g) => g.set_synthesis_flat(&params)?,
            None => domain.values_mut().copy_from_slice(&params),
        }
    }
    Ok(Adaptation {
        domain,
        generator: tuned,
        history,
    })
}

/// Finds a latent whose render matches `image` in embedding space, by Adam
/// on `mean_k ‖E_k(G(w)) − E_k(image)‖²` from the mean mapped latent.
pub fn naive_invert(
    gen: &Generator,
    ens: &EncoderEnsemble,
    image: &Image,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Inversion> {
    let res = gen.resolution();
    if image.dim() != (gen.config().rgb_channels, res, res) {
        return Err(shape_err(format!(
            "image shape {:?} does not match the generator output",
            image.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = gen.mean_w(INVERT_INIT_SAMPLES, &mut rng)?;
    let target = encode_members(ens, image)?;
    let k = ens.len() as f64;
    let adam_cfg = AdamConfig {
        lr,
        ..AdamConfig::hypernetwork()
    };
    let mut adam = AdamState::new(adam_cfg, w.len())?;
    let mut history = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let styles = gen.styles(&WPlus::broadcast(&w, gen.num_ws()))?;
        let (img, tape) = gen.synthesize_traced(&styles, None)?;
        let embs = encode_members(ens, &img)?;
        let mut loss = 0.0;
        let grads: Vec<Vec<f64>> = embs
            .iter()
            .zip(&target)
            .map(|(e, t)| {
                let diff = sub(e.as_slice(), t.as_slice());
                loss += diff.iter().map(|v| v * v).sum::<f64>() / k;
                diff.into_iter().map(|v| 2.0 * v / k).collect()
            })
            .collect();
        history.push(loss);
        if step == steps {
            break;
        }
        let gimg = pixel_grad(ens, &img, &grads)?;
        let g = gen.backward(&tape, gimg.view(), false);
        let per_layer = gen.latent_grads(&g);
        let mut gw = vec![0.0; w.len()];
        for layer in &per_layer {
            super::axpy(&mut gw, 1.0, layer);
        }
        adam.step(&mut w, &gw)?;
    }
    Ok(Inversion { w, history })
}
