//! Open-ended training distribution over domain embeddings: prompt
//! combinations, Dirichlet mixtures over a convex hull, and resampling on the
//! unit sphere at a fixed angle.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::losses::dot;
use crate::embedding::Embedding;
use crate::error::{shape_err, Error, Result};

pub const BUILTIN_STYLES: [&str; 31] = [
    "Pop Art",
    "Impressionism",
    "Renaissance",
    "Abstract",
    "Vintage",
    "Antiquity",
    "Cubism",
    "Disney",
    "Chinese",
    "Japanese",
    "Spanish",
    "Italian",
    "Dutch",
    "German",
    "Surreal",
    "WaltDisney",
    "DreamWorks",
    "Modern",
    "Realism",
    "Starry Night",
    "Old-timey",
    "Pencil",
    "Gouache",
    "Acrylic",
    "Watercolor",
    "Oil",
    "Black",
    "Blue",
    "Charcoal",
    "Manga",
    "Kodomo",
];

pub const BUILTIN_TYPES: [&str; 13] = [
    "Portrait",
    "Image",
    "Photo",
    "Painting",
    "Graffiti",
    "Photograph",
    "Cartoon",
    "Stereo View",
    "Drawing",
    "Graphics",
    "Mosaic",
    "Caricature",
    "Animation",
];

// "Salvaror" is kept as spelled in the published term list.
pub const BUILTIN_ARTISTS: [&str; 7] = [
    "Raphael",
    "Salvaror Dali",
    "Edvard Munch",
    "Modigliani",
    "Van Gogh",
    "Claude Monet",
    "Leonardo Da Vinci",
];

pub const DEFAULT_TEMPLATES: [&str; 2] = ["{style} {type}", "{type} in the style of {artist}"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Style,
    Type,
    Artist,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Piece {
    Lit(String),
    Slot(Slot),
}

/// Terms and templates used to build combination prompts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVocabulary {
    pub styles: Vec<String>,
    pub types: Vec<String>,
    pub artists: Vec<String>,
    pub templates: Vec<String>,
}

impl Default for PromptVocabulary {
    fn default() -> Self {
        Self::builtin()
    }
}

fn owned(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl PromptVocabulary {
    /// The shipped 31 styles, 13 types and 7 artists with the two default
    /// templates.
    pub fn builtin() -> Self {
        Self {
            styles: owned(&BUILTIN_STYLES),
            types: owned(&BUILTIN_TYPES),
            artists: owned(&BUILTIN_ARTISTS),
            templates: owned(&DEFAULT_TEMPLATES),
        }
    }

    /// Parses the plain-text format: `[styles]`, `[types]`, `[artists]` and
    /// `[templates]` headers followed by one entry per line. Blank lines and
    /// lines starting with `#` are skipped. A missing `[templates]` section
    /// falls back to the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut vocab = Self {
            styles: Vec::new(),
            types: Vec::new(),
            artists: Vec::new(),
            templates: Vec::new(),
        };
        let mut saw_templates = false;
        let mut section: Option<&mut Vec<String>> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(match name.trim() {
                    "styles" => &mut vocab.styles,
                    "types" => &mut vocab.types,
                    "artists" => &mut vocab.artists,
                    "templates" => {
                        saw_templates = true;
                        &mut vocab.templates
                    }
                    other => {
                        return Err(Error::Config(format!("line {}: unknown section [{other}]", no + 1)));
                    }
                });
                continue;
            }
            match section.as_deref_mut() {
                Some(list) => list.push(line.to_string()),
                None => {
                    return Err(Error::Config(format!(
                        "line {}: entry before any section header",
                        no + 1
                    )))
                }
            }
        }
        if !saw_templates {
            vocab.templates = owned(&DEFAULT_TEMPLATES);
        }
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn values(&self, slot: Slot) -> &[String] {
        match slot {
            Slot::Style => &self.styles,
            Slot::Type => &self.types,
            Slot::Artist => &self.artists,
        }
    }
}

fn parse_template(t: &str) -> Result<Vec<Piece>> {
    let mut out = Vec::new();
    let mut rest = t;
    while let Some(start) = rest.find('{') {
        if start > 0 {
            out.push(Piece::Lit(rest[..start].to_string()));
        }
        let end = rest[start..]
            .find('}')
            .ok_or_else(|| Error::Config(format!("unclosed slot in template {t:?}")))?;
        let slot = match &rest[start + 1..start + end] {
            "style" => Slot::Style,
            "type" => Slot::Type,
            "artist" => Slot::Artist,
            other => {
                return Err(Error::Config(format!(
                    "template {t:?} references unknown slot {{{other}}}"
                )))
            }
        };
        out.push(Piece::Slot(slot));
        rest = &rest[start + end + 1..];
    }
    if !rest.is_empty() {
        out.push(Piece::Lit(rest.to_string()));
    }
    Ok(out)
}

/// Expands every template over the vocabulary. The first slot of a template
/// varies slowest. Duplicates are dropped keeping the first occurrence; a
/// template whose slot has no values expands to nothing.
pub fn generate_combinations(vocab: &PromptVocabulary) -> Result<Vec<String>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for template in &vocab.templates {
        let pieces = parse_template(template)?;
        let slots: Vec<&[String]> = pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(vocab.values(*s)),
                Piece::Lit(_) => None,
            })
            .collect();
        if slots.iter().any(|v| v.is_empty()) {
            continue;
        }
        let total: usize = slots.iter().map(|v| v.len()).product();
        for n in 0..total {
            // mixed-radix decode, last slot fastest
            let mut idx = vec![0usize; slots.len()];
            let mut rem = n;
            for k in (0..slots.len()).rev() {
                idx[k] = rem % slots[k].len();
                rem /= slots[k].len();
            }
            let mut prompt = String::new();
            let mut k = 0;
            for p in &pieces {
                match p {
                    Piece::Lit(s) => prompt.push_str(s),
                    Piece::Slot(_) => {
                        prompt.push_str(&slots[k][idx[k]]);
                        k += 1;
                    }
                }
            }
            if seen.insert(prompt.clone()) {
                out.push(prompt);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HullSampleConfig {
    pub beta: f64,
}

impl HullSampleConfig {
    /// `beta = 1 / batch_size`.
    pub fn for_batch(batch_size: usize) -> Self {
        Self {
            beta: 1.0 / batch_size.max(1) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config("Dirichlet concentration must be positive".into()));
        }
        Ok(())
    }
}

/// Draws from a symmetric Dirichlet with concentration `beta` over `m`
/// coordinates.
///
/// Gamma variates are combined in log space using
/// `Gamma(a) = Gamma(a + 1) · U^(1/a)`, so tiny concentrations such as
/// `1/96` do not underflow to an all-zero draw.
pub fn sample_dirichlet<R: Rng + ?Sized>(m: usize, beta: f64, rng: &mut R) -> Result<Vec<f64>> {
    HullSampleConfig { beta }.validate()?;
    if m == 0 {
        return Err(Error::Input("Dirichlet needs at least one coordinate".into()));
    }
    let gamma = Gamma::new(beta + 1.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let logs: Vec<f64> = (0..m)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>();
            // U in (0, 1]; avoid ln(0)
            let u = 1.0 - u;
            g.ln() + u.ln() / beta
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// `Σ α_j t_j`.
pub fn hull_combination(points: &[&[f64]], alpha: &[f64]) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::Input("convex hull needs at least one point".into()));
    }
    if points.len() != alpha.len() {
        return Err(shape_err("one weight per hull point is required"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(shape_err("hull points differ in dimension"));
    }
    let mut out = vec![0.0; dim];
    for (p, &a) in points.iter().zip(alpha) {
        out.iter_mut().zip(p.iter()).for_each(|(o, v)| *o += a * v);
    }
    Ok(out)
}

/// A convex-hull draw: the (not renormalized) mixture and its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct HullSample {
    pub vector: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn sample_convex_hull<R: Rng + ?Sized>(
    embeddings: &[Embedding],
    cfg: &HullSampleConfig,
    rng: &mut R,
) -> Result<HullSample> {
    if embeddings.is_empty() {
        return Err(Error::Input("convex hull needs at least one embedding".into()));
    }
    let weights = sample_dirichlet(embeddings.len(), cfg.beta, rng)?;
    let points: Vec<&[f64]> = embeddings.iter().map(Embedding::as_slice).collect();
    Ok(HullSample {
        vector: hull_combination(&points, &weights)?,
        weights,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResampleConfig {
    /// Angle in radians between the input and the resampled embedding.
    pub gamma: f64,
    pub seed: u64,
}

pub const DEFAULT_GAMMA: f64 = 0.35;

impl Default for ResampleConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            seed: 0,
        }
    }
}

impl ResampleConfig {
    /// Accepts `[0, π)`; zero is allowed and returns inputs unchanged.
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && (0.0..std::f64::consts::PI).contains(&self.gamma)) {
            return Err(Error::Config(format!("gamma must lie in [0, pi), got {}", self.gamma)));
        }
        Ok(())
    }
}

/// `t·cos γ + u·sin γ` with `u` a random unit vector orthogonal to `t`.
pub fn resample_on_sphere<R: Rng + ?Sized>(t: &Embedding, gamma: f64, rng: &mut R) -> Result<Embedding> {
    ResampleConfig { gamma, seed: 0 }.validate()?;
    if gamma == 0.0 {
        return Ok(t.clone());
    }
    let t = t.as_slice();
    if t.len() < 2 {
        return Err(Error::Input("resampling needs at least two dimensions".into()));
    }
    let u = loop {
        let v: Vec<f64> = (0..t.len()).map(|_| StandardNormal.sample(rng)).collect();
        let p = dot(&v, t);
        let r: Vec<f64> = v.iter().zip(t).map(|(a, b)| a - p * b).collect();
        let n = dot(&r, &r).sqrt();
        if n >= 1e-9 {
            break r.into_iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    let (s, c) = gamma.sin_cos();
    Embedding::normalize(t.iter().zip(&u).map(|(a, b)| a * c + b * s).collect())
}

/// Open-ended domain distribution: for every draw each base embedding is
/// resampled at angle `gamma`, then a Dirichlet mixture of the resampled set
/// is returned.
///
/// `bases[k]` holds the base embeddings as seen by encoder `k` of an
/// ensemble. The same mixture weights are used for every encoder, while
/// resampling is independent per encoder space.
#[derive(Clone, Debug)]
pub struct OpenDomainSampler {
    bases: Vec<Vec<Embedding>>,
    gamma: f64,
    hull: HullSampleConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpenDraw {
    /// Mixture per encoder, not renormalized.
    pub vectors: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl OpenDomainSampler {
    pub fn new(bases: Vec<Vec<Embedding>>, gamma: f64, hull: HullSampleConfig) -> Result<Self> {
        ResampleConfig { gamma, seed: 0 }.validate()?;
        hull.validate()?;
        let m = bases.first().map(Vec::len).unwrap_or(0);
        if m == 0 {
            return Err(Error::Input("open sampler needs at least one base embedding".into()));
        }
        if bases.iter().any(|b| b.len() != m) {
            return Err(shape_err("every encoder must see the same base set"));
        }
        Ok(Self { bases, gamma, hull })
    }

    pub fn num_bases(&self) -> usize {
        self.bases[0].len()
    }

    pub fn num_encoders(&self) -> usize {
        self.bases.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<OpenDraw> {
        let weights = sample_dirichlet(self.num_bases(), self.hull.beta, rng)?;
        let mut vectors = Vec::with_capacity(self.bases.len());
        for base in &self.bases {
            let moved = base
                .iter()
                .map(|t| resample_on_sphere(t, self.gamma, rng))
                .collect::<Result<Vec<_>>>()?;
            let points: Vec<&[f64]> = moved.iter().map(Embedding::as_slice).collect();
            vectors.push(hull_combination(&points, &weights)?);
        }
        Ok(OpenDraw { vectors, weights })
    }
}
