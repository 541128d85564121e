//! Single-domain objective shared by text and one-shot adaptation:
//! `λ_dir · Σ_b L_direction(ΔI_b, Δ_ref) + λ_ind · L_indomain`, with each term
//! averaged over ensemble members.

use rand::Rng;

use crate::embedding::losses::{direction_loss_grad, indomain_angle, sub};
use crate::embedding::{Embedding, EncoderEnsemble};
use crate::error::{shape_err, Result};
use crate::generator::{DomainVector, Generator, Image, Styles};

use super::{axpy, encode_members, pixel_grad, sample_styles};

/// Latents for one iteration and the frozen source renders.
#[derive(Clone, Debug)]
pub struct SampledBatch {
    pub styles: Vec<Styles>,
    pub source_images: Vec<Image>,
    /// `source_embs[b][k]`: element `b` under encoder `k`.
    pub source_embs: Vec<Vec<Embedding>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DirectionTerms {
    /// Direction (or clip-across) term summed over the batch.
    pub direction: f64,
    pub indomain: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveGrad {
    /// Gradient w.r.t. the domain vector (zero-length when it is absent).
    pub domain: Vec<f64>,
    /// Flat synthesis-weight gradient in full fine-tuning.
    pub weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct DirectionObjective<'a> {
    source: &'a Generator,
    ens: &'a EncoderEnsemble,
    /// Reference direction per ensemble member.
    refs: Vec<Vec<f64>>,
    w_dir: f64,
    w_ind: f64,
}

impl<'a> DirectionObjective<'a> {
    pub fn new(
        source: &'a Generator,
        ens: &'a EncoderEnsemble,
        refs: Vec<Vec<f64>>,
        w_dir: f64,
        w_ind: f64,
    ) -> Result<Self> {
        if refs.len() != ens.len() || refs.iter().any(|r| r.len() != ens.embed_dim()) {
            return Err(shape_err("one reference direction per encoder is required"));
        }
        Ok(Self {
            source,
            ens,
            refs,
            w_dir,
            w_ind,
        })
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, mixing_prob: f64, rng: &mut R) -> Result<SampledBatch> {
        let styles = sample_styles(self.source, n, mixing_prob, rng)?;
        let source_images = styles
            .iter()
            .map(|s| self.source.synthesize(s, None))
            .collect::<Result<Vec<_>>>()?;
        let source_embs = source_images
            .iter()
            .map(|img| encode_members(self.ens, img))
            .collect::<Result<Vec<_>>>()?;
        Ok(SampledBatch {
            styles,
            source_images,
            source_embs,
        })
    }

    /// Loss of `adapted` (with optional domain vector) on a fixed batch.
    pub fn evaluate(
        &self,
        adapted: &Generator,
        d: Option<&DomainVector>,
        batch: &SampledBatch,
    ) -> Result<DirectionTerms> {
        Ok(self.run(adapted, d, batch, false, false)?.0)
    }

    /// Loss and gradient; weight gradients are produced when `want_weights`.
    pub fn gradient(
        &self,
        adapted: &Generator,
        d: Option<&DomainVector>,
        batch: &SampledBatch,
        want_weights: bool,
    ) -> Result<(DirectionTerms, ObjectiveGrad)> {
        let (terms, grad) = self.run(adapted, d, batch, true, want_weights)?;
        Ok((terms, grad.expect("requested")))
    }

    fn run(
        &self,
        adapted: &Generator,
        d: Option<&DomainVector>,
        batch: &SampledBatch,
        backward: bool,
        want_weights: bool,
    ) -> Result<(DirectionTerms, Option<ObjectiveGrad>)> {
        let n = batch.styles.len();
        let k_count = self.ens.len();
        let inv_k = 1.0 / k_count as f64;
        let mut images = Vec::with_capacity(n);
        let mut tapes = Vec::with_capacity(n);
        let mut embs = Vec::with_capacity(n);
        for s in &batch.styles {
            let (img, tape) = adapted.synthesize_traced(s, d)?;
            embs.push(encode_members(self.ens, &img)?);
            images.push(img);
            tapes.push(tape);
        }

        let dim = self.ens.embed_dim();
        // emb_grads[b][k]
        let mut emb_grads = vec![vec![vec![0.0; dim]; k_count]; n];
        let mut direction = 0.0;
        for b in 0..n {
            for k in 0..k_count {
                let delta = sub(embs[b][k].as_slice(), batch.source_embs[b][k].as_slice());
                let (l, g) = direction_loss_grad(&delta, &self.refs[k])?;
                direction += l * inv_k;
                axpy(&mut emb_grads[b][k], self.w_dir * inv_k, &g);
            }
        }
        let mut indomain = 0.0;
        if n >= 2 {
            for k in 0..k_count {
                let a: Vec<&[f64]> = embs.iter().map(|e| e[k].as_slice()).collect();
                let s: Vec<&[f64]> = batch.source_embs.iter().map(|e| e[k].as_slice()).collect();
                let (l, g) = indomain_angle(&a, &s)?;
                indomain += l * inv_k;
                for (b, gb) in g.iter().enumerate() {
                    axpy(&mut emb_grads[b][k], self.w_ind * inv_k, gb);
                }
            }
        }
        let terms = DirectionTerms {
            direction,
            indomain,
            total: self.w_dir * direction + self.w_ind * indomain,
        };
        if !backward {
            return Ok((terms, None));
        }

        let mut domain = vec![0.0; d.map_or(0, DomainVector::len)];
        let mut weights: Option<Vec<f64>> = None;
        for b in 0..n {
            if emb_grads[b].iter().flatten().all(|&v| v == 0.0) {
                continue;
            }
            let gimg = pixel_grad(self.ens, &images[b], &emb_grads[b])?;
            let g = adapted.backward(&tapes[b], gimg.view(), want_weights);
            if d.is_some() {
                axpy(&mut domain, 1.0, &g.domain);
            }
            if let Some(w) = g.weights {
                let flat = w.flatten();
                match weights.as_mut() {
                    Some(acc) => axpy(acc, 1.0, &flat),
                    None => weights = Some(flat),
                }
            }
        }
        if want_weights && weights.is_none() {
            weights = Some(vec![0.0; adapted.count_parameters().synthesis]);
        }
        Ok((terms, Some(ObjectiveGrad { domain, weights })))
    }
}
