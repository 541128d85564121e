//! CLIP-like encoder interface, deterministic mock encoders, and every
//! CLIP-space loss and metric used by the trainers.

pub mod losses;
mod metrics;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::generator::Image;
pub use losses::{direction_loss, domain_norm as domain_norm_loss_grad, COSINE_EPS};
pub use metrics::{diversity_from_embeddings, diversity_metric, quality_from_embeddings, quality_metric};

/// Unit-norm vector in the joint text/image space.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `v`; fails on a zero or non-finite vector.
    pub fn normalize(v: Vec<f64>) -> Result<Self> {
        let norm = losses::dot(&v, &v).sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Input("cannot normalize a zero or non-finite vector".into()));
        }
        Ok(Self(v.into_iter().map(|x| x / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A paired image/text encoder mapping into a shared unit sphere.
pub trait Encoder: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn embed_dim(&self) -> usize;
    fn encode_image(&self, image: ArrayView3<f64>) -> Result<Embedding>;
    fn encode_text(&self, text: &str) -> Result<Embedding>;
    /// Pulls a gradient with respect to the embedding of `image` back to
    /// pixel space.
    fn image_vjp(&self, image: ArrayView3<f64>, grad: &[f64]) -> Result<Array3<f64>>;
}

/// Deterministic stand-in for a CLIP model.
///
/// Images are average-pooled to a `grid × grid × 3` tensor, flattened,
/// projected by a seeded Gaussian matrix plus a small seeded offset, and
/// normalized. Text is hashed together with the seed into a random unit
/// vector. The offset keeps all-zero images encodable.
#[derive(Clone)]
pub struct MockEncoder {
    seed: u64,
    grid: usize,
    projection: Array2<f64>,
    offset: Array1<f64>,
}

impl fmt::Debug for MockEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MockEncoder")
            .field("seed", &self.seed)
            .field("embed_dim", &self.embed_dim())
            .field("grid", &self.grid)
            .finish()
    }
}

pub const MOCK_GRID: usize = 16;
const MOCK_CHANNELS: usize = 3;

impl MockEncoder {
    pub fn new(seed: u64, embed_dim: usize) -> Result<Self> {
        if embed_dim < 2 {
            return Err(Error::Config("embed_dim must be at least 2".into()));
        }
        let inputs = MOCK_CHANNELS * MOCK_GRID * MOCK_GRID;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_636b_656e_6331);
        let scale = 1.0 / (inputs as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((embed_dim, inputs), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        let offset_scale = 0.05 / (embed_dim as f64).sqrt();
        let offset = Array1::from_shape_simple_fn(embed_dim, || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * offset_scale
        });
        Ok(Self {
            seed,
            grid: MOCK_GRID,
            projection,
            offset,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn block(&self, image: ArrayView3<f64>) -> Result<(usize, usize)> {
        let (c, h, w) = image.dim();
        if c != MOCK_CHANNELS {
            return Err(Error::Input(format!("mock encoder expects 3 channels, got {c}")));
        }
        if h < self.grid || w < self.grid || h % self.grid != 0 || w % self.grid != 0 {
            return Err(Error::Input(format!(
                "image {h}x{w} cannot be pooled onto a {0}x{0} grid",
                self.grid
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("image has non-finite pixels".into()));
        }
        Ok((h / self.grid, w / self.grid))
    }

    fn pool(&self, image: ArrayView3<f64>, bh: usize, bw: usize) -> Array1<f64> {
        let g = self.grid;
        let mut pooled = Array1::zeros(MOCK_CHANNELS * g * g);
        let area = (bh * bw) as f64;
        for c in 0..MOCK_CHANNELS {
            for gy in 0..g {
                for gx in 0..g {
                    let mut acc = 0.0;
                    for y in gy * bh..(gy + 1) * bh {
                        for x in gx * bw..(gx + 1) * bw {
                            acc += image[[c, y, x]];
                        }
                    }
                    pooled[(c * g + gy) * g + gx] = acc / area;
                }
            }
        }
        pooled
    }

    fn pre_norm(&self, image: ArrayView3<f64>) -> Result<(Array1<f64>, usize, usize)> {
        let (bh, bw) = self.block(image)?;
        let z = self.projection.dot(&self.pool(image, bh, bw)) + &self.offset;
        Ok((z, bh, bw))
    }
}

impl Encoder for MockEncoder {
    fn name(&self) -> String {
        format!("mock-{}", self.seed)
    }

    fn embed_dim(&self) -> usize {
        self.projection.nrows()
    }

    fn encode_image(&self, image: ArrayView3<f64>) -> Result<Embedding> {
        Embedding::normalize(self.pre_norm(image)?.0.to_vec())
    }

    fn encode_text(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(Error::Input("text must be non-empty".into()));
        }
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let v = (0..self.embed_dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
        Embedding::normalize(v)
    }

    fn image_vjp(&self, image: ArrayView3<f64>, grad: &[f64]) -> Result<Array3<f64>> {
        if grad.len() != self.embed_dim() {
            return Err(shape_err("embedding gradient has the wrong dimension"));
        }
        let (z, bh, bw) = self.pre_norm(image)?;
        let norm = z.dot(&z).sqrt();
        let e = &z / norm;
        let g = Array1::from(grad.to_vec());
        let gz = (&g - &(&e * e.dot(&g))) / norm;
        let gp = self.projection.t().dot(&gz);
        let (c, h, w) = image.dim();
        let area = (bh * bw) as f64;
        let grid = self.grid;
        Ok(Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
            gp[(ci * grid + y / bh) * grid + x / bw] / area
        }))
    }
}

/// Ordered set of encoders; losses average over members.
#[derive(Clone, Debug)]
pub struct EncoderEnsemble {
    members: Vec<Arc<dyn Encoder>>,
}

impl EncoderEnsemble {
    pub fn new(members: Vec<Arc<dyn Encoder>>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Config("an encoder ensemble needs at least one member".into()))?;
        let dim = first.embed_dim();
        if members.iter().any(|m| m.embed_dim() != dim) {
            return Err(Error::Config("ensemble members must share embed_dim".into()));
        }
        Ok(Self { members })
    }

    pub fn single(encoder: Arc<dyn Encoder>) -> Self {
        Self { members: vec![encoder] }
    }

    /// Mock ensemble with one member per seed.
    pub fn mock(seeds: &[u64], embed_dim: usize) -> Result<Self> {
        let members = seeds
            .iter()
            .map(|&s| MockEncoder::new(s, embed_dim).map(|m| Arc::new(m) as Arc<dyn Encoder>))
            .collect::<Result<_>>()?;
        Self::new(members)
    }

    pub fn members(&self) -> &[Arc<dyn Encoder>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.members[0].embed_dim()
    }

    /// Arithmetic mean of `f` over members.
    pub fn mean<F>(&self, f: F) -> Result<f64>
    where
        F: Fn(&dyn Encoder) -> Result<f64>,
    {
        let mut acc = 0.0;
        for m in &self.members {
            acc += f(m.as_ref())?;
        }
        Ok(acc / self.members.len() as f64)
    }

    pub fn encode_image_all(&self, image: ArrayView3<f64>) -> Result<Vec<Embedding>> {
        self.members.iter().map(|m| m.encode_image(image)).collect()
    }

    pub fn encode_text_all(&self, text: &str) -> Result<Vec<Embedding>> {
        self.members.iter().map(|m| m.encode_text(text)).collect()
    }
}

/// Parameters naming an encoder in an [`EncoderRegistry`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: String,
    pub seed: u64,
    pub embed_dim: usize,
}

pub type EncoderFactory = Box<dyn Fn(&EncoderSpec) -> Result<Arc<dyn Encoder>> + Send + Sync>;

/// Named encoder constructors. `"mock"` is always registered; real model
/// adapters register themselves under their own name.
pub struct EncoderRegistry {
    factories: BTreeMap<String, EncoderFactory>,
}

impl Default for EncoderRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register(
            "mock",
            Box::new(|spec| Ok(Arc::new(MockEncoder::new(spec.seed, spec.embed_dim)?) as Arc<dyn Encoder>)),
        );
        r
    }
}

impl EncoderRegistry {
    pub fn register(&mut self, name: &str, factory: EncoderFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, spec: &EncoderSpec) -> Result<Arc<dyn Encoder>> {
        let f = self
            .factories
            .get(&spec.kind)
            .ok_or_else(|| Error::Config(format!("unknown encoder kind {:?}", spec.kind)))?;
        f(spec)
    }
}

/// How a target domain is given.
#[derive(Clone, Debug, PartialEq)]
pub enum DomainPayload {
    Text(String),
    Image(Image),
    Embedding(Embedding),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDescriptor {
    pub payload: DomainPayload,
    /// Description of the source domain, e.g. "Photo" or "Human".
    pub source_text: Option<String>,
}

impl DomainDescriptor {
    pub fn text(target: &str, source: &str) -> Self {
        Self {
            payload: DomainPayload::Text(target.to_string()),
            source_text: Some(source.to_string()),
        }
    }
}

/// Weights of every loss term. The `clip_within`, `ref_l2` and `ref_lpips`
/// slots name the reconstruction terms of the one-shot method that are not
/// implemented here; they must stay zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub direction: f64,
    pub indomain: f64,
    pub tt_direction: f64,
    pub domain_norm: f64,
    pub clip_across: f64,
    pub clip_within: f64,
    pub ref_l2: f64,
    pub ref_lpips: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::zero()
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            direction: 0.0,
            indomain: 0.0,
            tt_direction: 0.0,
            domain_norm: 0.0,
            clip_across: 0.0,
            clip_within: 0.0,
            ref_l2: 0.0,
            ref_lpips: 0.0,
        }
    }

    pub fn text_defaults() -> Self {
        Self {
            direction: 1.0,
            indomain: 0.5,
            ..Self::zero()
        }
    }

    pub fn one_shot_defaults() -> Self {
        Self {
            clip_across: 1.0,
            indomain: 2.0,
            ..Self::zero()
        }
    }

    pub fn hdn_defaults() -> Self {
        Self {
            direction: 1.0,
            tt_direction: 0.4,
            domain_norm: 0.8,
            ..Self::zero()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.direction,
            self.indomain,
            self.tt_direction,
            self.domain_norm,
            self.clip_across,
            self.clip_within,
            self.ref_l2,
            self.ref_lpips,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.clip_within != 0.0 || self.ref_l2 != 0.0 || self.ref_lpips != 0.0 {
            return Err(Error::Config(
                "clip_within, ref_l2 and ref_lpips are reserved and must be zero".into(),
            ));
        }
        Ok(())
    }
}

/// `E_T(t_b) − E_T(t_a)`.
pub fn text_direction(enc: &dyn Encoder, target: &str, source: &str) -> Result<Vec<f64>> {
    let b = enc.encode_text(target)?;
    let a = enc.encode_text(source)?;
    Ok(losses::sub(b.as_slice(), a.as_slice()))
}

/// `E_I(img_b) − E_I(img_a)`.
pub fn image_direction(enc: &dyn Encoder, img_b: ArrayView3<f64>, img_a: ArrayView3<f64>) -> Result<Vec<f64>> {
    let b = enc.encode_image(img_b)?;
    let a = enc.encode_image(img_a)?;
    Ok(losses::sub(b.as_slice(), a.as_slice()))
}

/// `E_I(img_b)` minus the mean embedding of a set of source-domain images.
pub fn mean_image_direction(enc: &dyn Encoder, img_b: ArrayView3<f64>, domain_a: &[Image]) -> Result<Vec<f64>> {
    if domain_a.is_empty() {
        return Err(Error::Input("mean direction needs at least one source image".into()));
    }
    let b = enc.encode_image(img_b)?;
    let mut mean = vec![0.0; enc.embed_dim()];
    for img in domain_a {
        let e = enc.encode_image(img.view())?;
        mean.iter_mut().zip(e.as_slice()).for_each(|(m, v)| *m += v);
    }
    let n = domain_a.len() as f64;
    Ok(b.as_slice().iter().zip(&mean).map(|(x, m)| x - m / n).collect())
}

/// Direction from the projection of the style image onto the source domain
/// to the style image itself.
pub fn projection_direction(
    enc: &dyn Encoder,
    img_b: ArrayView3<f64>,
    img_a_star: ArrayView3<f64>,
) -> Result<Vec<f64>> {
    image_direction(enc, img_b, img_a_star)
}

/// Direction loss between the adapted-vs-source image direction and a
/// projection direction.
pub fn clip_across_loss(
    enc: &dyn Encoder,
    adapted: ArrayView3<f64>,
    source: ArrayView3<f64>,
    projection_dir: &[f64],
) -> Result<f64> {
    direction_loss(&image_direction(enc, adapted, source)?, projection_dir)
}

/// Direction loss between two target-domain renders and their two texts.
pub fn tt_direction_loss(
    enc: &dyn Encoder,
    img_bi: ArrayView3<f64>,
    img_bj: ArrayView3<f64>,
    text_bi: &str,
    text_bj: &str,
) -> Result<f64> {
    let di = image_direction(enc, img_bi, img_bj)?;
    let dt = text_direction(enc, text_bi, text_bj)?;
    direction_loss(&di, &dt)
}

/// Pairwise-cosine consistency between adapted and source batches, averaged
/// over ensemble members.
pub fn indomain_angle_loss(ens: &EncoderEnsemble, adapted: &[Image], source: &[Image]) -> Result<f64> {
    if adapted.len() != source.len() {
        return Err(shape_err("adapted and source batches differ in size"));
    }
    if adapted.len() < 2 {
        return Err(Error::Input("indomain-angle loss needs at least two samples".into()));
    }
    ens.mean(|enc| {
        let a = adapted
            .iter()
            .map(|i| enc.encode_image(i.view()))
            .collect::<Result<Vec<_>>>()?;
        let s = source
            .iter()
            .map(|i| enc.encode_image(i.view()))
            .collect::<Result<Vec<_>>>()?;
        let a: Vec<&[f64]> = a.iter().map(Embedding::as_slice).collect();
        let s: Vec<&[f64]> = s.iter().map(Embedding::as_slice).collect();
        Ok(losses::indomain_angle(&a, &s)?.0)
    })
}

/// `‖d − 1‖²`.
pub fn domain_norm_loss(d: &crate::generator::DomainVector) -> f64 {
    losses::domain_norm(d.values()).0
}
