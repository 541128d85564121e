//! Multi-domain hypernetwork training:
//! `λ_dir · Σ_b L_direction + λ_tt · mean_pairs L_tt-direction + λ_norm · Σ_domains ‖d − 1‖²`.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::losses::{direction_loss_grad, domain_norm, sub};
use crate::embedding::{DomainDescriptor, DomainPayload, EncoderEnsemble};
use crate::error::{shape_err, Error, Result};
use crate::generator::{Generator, Image, Styles};
use crate::hdn::{HdnConfig, HdnParams};
use crate::optim::AdamState;
use crate::sampler::OpenDomainSampler;

use super::{axpy, encode_members, pixel_grad, sample_styles, LossHistory, TrainingConfig, TrainingMode};

/// Where training domains come from.
#[derive(Clone, Debug)]
pub enum HdnDomains {
    /// A fixed list of text descriptors.
    Fixed(Vec<DomainDescriptor>),
    /// Fresh embeddings drawn every iteration; all share one source text.
    Open {
        sampler: OpenDomainSampler,
        source_text: String,
    },
}

#[derive(Clone, Debug)]
pub struct HdnTraining {
    pub params: HdnParams,
    pub history: LossHistory,
}

#[derive(Clone, Debug)]
struct Element {
    /// Equal keys mean the same domain.
    key: usize,
    /// Hypernetwork input (first encoder's embedding).
    input: Vec<f64>,
    /// Target and source text embeddings per encoder.
    targets: Vec<Vec<f64>>,
    sources: Vec<Vec<f64>>,
    group: usize,
}

#[derive(Clone, Debug)]
struct Group {
    styles: Styles,
    source_embs: Vec<Vec<f64>>,
}

/// One iteration's domain assignment, shared latents and source renders.
#[derive(Clone, Debug)]
pub struct HdnBatch {
    elements: Vec<Element>,
    groups: Vec<Group>,
}

impl HdnBatch {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn domain_keys(&self) -> Vec<usize> {
        self.elements.iter().map(|e| e.key).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HdnTerms {
    pub direction: f64,
    pub tt_direction: f64,
    pub domain_norm: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
struct FixedDomain {
    input: Vec<f64>,
    targets: Vec<Vec<f64>>,
    sources: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
enum Source {
    Fixed(Vec<FixedDomain>),
    Open {
        sampler: OpenDomainSampler,
        sources: Vec<Vec<f64>>,
    },
}

/// Hypernetwork objective with embeddings of the training domains cached.
#[derive(Clone, Debug)]
pub struct HdnObjective<'a> {
    gen: &'a Generator,
    ens: &'a EncoderEnsemble,
    source: Source,
    cfg: TrainingConfig,
}

impl<'a> HdnObjective<'a> {
    pub fn new(
        gen: &'a Generator,
        ens: &'a EncoderEnsemble,
        domains: &HdnDomains,
        cfg: &TrainingConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let source = match domains {
            HdnDomains::Fixed(list) => {
                if cfg.mode != TrainingMode::HdnFixed {
                    return Err(Error::Config("a fixed domain list needs hdn-fixed mode".into()));
                }
                if list.is_empty() {
                    return Err(Error::Config("no training domains given".into()));
                }
                if list.len() < 2 && cfg.weights.tt_direction > 0.0 {
                    return Err(Error::Config("the tt-direction loss needs at least two domains".into()));
                }
                let fixed = list
                    .iter()
                    .map(|desc| {
                        let DomainPayload::Text(t) = &desc.payload else {
                            return Err(Error::Input("hypernetwork domains must be text".into()));
                        };
                        let src = desc.source_text.as_deref().unwrap_or(&cfg.source_text);
                        let targets = ens
                            .encode_text_all(t)?
                            .into_iter()
                            .map(|e| e.into_inner())
                            .collect::<Vec<_>>();
                        let sources = ens.encode_text_all(src)?.into_iter().map(|e| e.into_inner()).collect();
                        Ok(FixedDomain {
                            input: targets[0].clone(),
                            targets,
                            sources,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Source::Fixed(fixed)
            }
            HdnDomains::Open { sampler, source_text } => {
                if cfg.mode != TrainingMode::HdnOpen {
                    return Err(Error::Config("an open sampler needs hdn-open mode".into()));
                }
                if sampler.num_encoders() != ens.len() {
                    return Err(shape_err("sampler bases must cover every encoder"));
                }
                let sources = ens
                    .encode_text_all(source_text)?
                    .into_iter()
                    .map(|e| e.into_inner())
                    .collect();
                Source::Open {
                    sampler: sampler.clone(),
                    sources,
                }
            }
        };
        Ok(Self {
            gen,
            ens,
            source,
            cfg: cfg.clone(),
        })
    }

    fn group_size(&self) -> usize {
        let n = self.cfg.batch_size;
        let g = match (&self.source, self.cfg.group_size) {
            (Source::Fixed(list), 0) => list.len().min(n),
            (Source::Open { .. }, 0) => n,
            (_, g) => g,
        };
        g.clamp(1, n)
    }

    /// Hypernetwork input for fixed domain `i`.
    pub fn domain_input(&self, i: usize) -> Option<&[f64]> {
        match &self.source {
            Source::Fixed(list) => list.get(i).map(|d| d.input.as_slice()),
            Source::Open { .. } => None,
        }
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, iteration: usize, rng: &mut R) -> Result<HdnBatch> {
        let n = self.cfg.batch_size;
        let g = self.group_size();
        let num_groups = n.div_ceil(g);
        let styles = sample_styles(self.gen, num_groups, self.cfg.mixing_prob, rng)?;
        let groups = styles
            .into_iter()
            .map(|s| {
                let img = self.gen.synthesize(&s, None)?;
                let source_embs = encode_members(self.ens, &img)?
                    .into_iter()
                    .map(|e| e.into_inner())
                    .collect();
                Ok(Group { styles: s, source_embs })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut elements = Vec::with_capacity(n);
        for b in 0..n {
            let group = b / g;
            let el = match &self.source {
                Source::Fixed(list) => {
                    let key = (iteration * n + b) % list.len();
                    let dom = &list[key];
                    Element {
                        key,
                        input: dom.input.clone(),
                        targets: dom.targets.clone(),
                        sources: dom.sources.clone(),
                        group,
                    }
                }
                Source::Open { sampler, sources } => {
                    let draw = sampler.sample(rng)?;
                    Element {
                        key: iteration * n + b,
                        input: draw.vectors[0].clone(),
                        targets: draw.vectors,
                        sources: sources.clone(),
                        group,
                    }
                }
            };
            elements.push(el);
        }
        Ok(HdnBatch { elements, groups })
    }

    pub fn evaluate(&self, params: &HdnParams, batch: &HdnBatch) -> Result<HdnTerms> {
        self.run(params, batch, None)
    }

    /// Loss terms, accumulating `∂L/∂φ` into `grad`.
    pub fn gradient(&self, params: &HdnParams, batch: &HdnBatch, grad: &mut HdnParams) -> Result<HdnTerms> {
        self.run(params, batch, Some(grad))
    }

    fn run(&self, params: &HdnParams, batch: &HdnBatch, grad: Option<&mut HdnParams>) -> Result<HdnTerms> {
        let w = self.cfg.weights;
        let k_count = self.ens.len();
        let inv_k = 1.0 / k_count as f64;
        let n = batch.elements.len();

        let mut preds = Vec::with_capacity(n);
        let mut images: Vec<Image> = Vec::with_capacity(n);
        let mut synth_tapes = Vec::with_capacity(n);
        let mut embs = Vec::with_capacity(n);
        for el in &batch.elements {
            let (d, tape) = params.forward_traced(&el.input)?;
            let (img, st) = self.gen.synthesize_traced(&batch.groups[el.group].styles, Some(&d))?;
            embs.push(
                encode_members(self.ens, &img)?
                    .into_iter()
                    .map(|e| e.into_inner())
                    .collect::<Vec<_>>(),
            );
            images.push(img);
            synth_tapes.push(st);
            preds.push((d, tape));
        }

        let dim = self.ens.embed_dim();
        let mut emb_grads = vec![vec![vec![0.0; dim]; k_count]; n];

        let mut direction = 0.0;
        for (b, el) in batch.elements.iter().enumerate() {
            let src = &batch.groups[el.group].source_embs;
            for k in 0..k_count {
                let di = sub(&embs[b][k], &src[k]);
                let dt = sub(&el.targets[k], &el.sources[k]);
                let (l, g) = direction_loss_grad(&di, &dt)?;
                direction += l * inv_k;
                axpy(&mut emb_grads[b][k], w.direction * inv_k, &g);
            }
        }

        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|b| (b + 1..n).map(move |c| (b, c)))
            .filter(|&(b, c)| {
                let (eb, ec) = (&batch.elements[b], &batch.elements[c]);
                eb.group == ec.group && eb.key != ec.key
            })
            .collect();
        let mut tt = 0.0;
        if !pairs.is_empty() {
            let scale = inv_k / pairs.len() as f64;
            for &(b, c) in &pairs {
                for k in 0..k_count {
                    let di = sub(&embs[b][k], &embs[c][k]);
                    let dt = sub(&batch.elements[b].targets[k], &batch.elements[c].targets[k]);
                    let (l, g) = direction_loss_grad(&di, &dt)?;
                    tt += l * scale;
                    axpy(&mut emb_grads[b][k], w.tt_direction * scale, &g);
                    axpy(&mut emb_grads[c][k], -w.tt_direction * scale, &g);
                }
            }
        }

        let mut seen = HashSet::new();
        let mut norm = 0.0;
        let mut norm_grads: Vec<Option<Vec<f64>>> = vec![None; n];
        for (b, el) in batch.elements.iter().enumerate() {
            if seen.insert(el.key) {
                let (l, g) = domain_norm(preds[b].0.values());
                norm += l;
                norm_grads[b] = Some(g);
            }
        }

        let terms = HdnTerms {
            direction,
            tt_direction: tt,
            domain_norm: norm,
            total: w.direction * direction + w.tt_direction * tt + w.domain_norm * norm,
        };
        let Some(grad) = grad else {
            return Ok(terms);
        };
        for b in 0..n {
            let mut gd = vec![0.0; params.layout().total_dim()];
            if emb_grads[b].iter().flatten().any(|&v| v != 0.0) {
                let gimg = pixel_grad(self.ens, &images[b], &emb_grads[b])?;
                let sg = self.gen.backward(&synth_tapes[b], gimg.view(), false);
                gd = sg.domain;
            }
            if let Some(ng) = &norm_grads[b] {
                axpy(&mut gd, w.domain_norm, ng);
            }
            if gd.iter().all(|&v| v == 0.0) {
                continue;
            }
            params.backward(&preds[b].1, &gd, grad)?;
        }
        Ok(terms)
    }
}

/// Trains a freshly initialized hypernetwork.
pub fn train_hdn(
    gen: &Generator,
    ens: &EncoderEnsemble,
    domains: &HdnDomains,
    hdn_cfg: &HdnConfig,
    cfg: &TrainingConfig,
) -> Result<HdnTraining> {
    if hdn_cfg.embed_dim != ens.embed_dim() {
        return Err(Error::Config(format!(
            "hypernetwork embed_dim {} does not match the encoders' {}",
            hdn_cfg.embed_dim,
            ens.embed_dim()
        )));
    }
    let params = HdnParams::new(hdn_cfg, gen.layout())?;
    train_hdn_from(gen, ens, domains, params, cfg)
}

/// Trains starting from the given parameters.
pub fn train_hdn_from(
    gen: &Generator,
    ens: &EncoderEnsemble,
    domains: &HdnDomains,
    mut params: HdnParams,
    cfg: &TrainingConfig,
) -> Result<HdnTraining> {
    if !cfg.mode.is_hdn() {
        return Err(Error::Config("train_hdn needs an hdn mode".into()));
    }
    if params.layout() != gen.layout() {
        return Err(shape_err("hypernetwork layout does not match the generator"));
    }
    let objective = HdnObjective::new(gen, ens, domains, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = LossHistory::new(&["direction", "tt_direction", "domain_norm"]);
    let mut flat = params.flatten();
    let mut adam = AdamState::new(cfg.adam, flat.len())?;
    for it in 0..cfg.iterations {
        let batch = objective.sample_batch(it, &mut rng)?;
        let mut grad = params.zeros_like();
        let t = objective.gradient(&params, &batch, &mut grad)?;
        history.push(vec![t.direction, t.tt_direction, t.domain_norm, t.total])?;
        adam.step(&mut flat, &grad.flatten())?;
        params.set_flat(&flat)?;
    }
    Ok(HdnTraining { params, history })
}
