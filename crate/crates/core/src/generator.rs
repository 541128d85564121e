//! A compact style-based generator: mapping network, per-layer affine style
//! transforms, a synthesis stack of modulated convolutions on a learned
//! constant, and toRGB skip outputs.
//!
//! Every feature convolution can additionally be domain-modulated by one
//! slice of a flat [`DomainVector`]; toRGB layers never are. There is no
//! noise injection and upsampling is nearest-neighbour, so the forward pass
//! is a deterministic function of the parameters, styles and domain vector.

use std::f64::consts::SQRT_2;

use ndarray::{Array1, Array3, Array4, ArrayView3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conv::{downsum2, upsample2};
use crate::error::{shape_err, Error, Result};
use crate::modconv::{mod_conv_traced, ConvWeight, ModConvConfig, ModConvTape};
use crate::nn::{leaky_relu, leaky_relu_grad, standard_normal_vec, Dense};

/// Image tensor (channels, height, width) with unbounded values.
pub type Image = Array3<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Dimension of both z and w.
    pub latent_dim: usize,
    pub mapping_layers: usize,
    /// Channel count per resolution, starting at 4×4 and doubling each step.
    pub channels: Vec<usize>,
    pub rgb_channels: usize,
    pub seed: u64,
    /// Affine style weights are drawn with std `style_gain / sqrt(latent_dim)`
    /// around a bias of one.
    pub style_gain: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl GeneratorConfig {
    /// Desk-scale configuration: 32×32 output, 336-dimensional domain vector.
    pub fn toy() -> Self {
        Self {
            latent_dim: 64,
            mapping_layers: 2,
            channels: vec![64, 64, 32, 16],
            rgb_channels: 3,
            seed: 0,
            style_gain: 0.25,
        }
    }

    /// The 1024×1024 StyleGAN2 channel table (17 feature convolutions).
    pub fn full_scale() -> Self {
        Self {
            latent_dim: 512,
            mapping_layers: 8,
            channels: vec![512, 512, 512, 512, 512, 256, 128, 64, 32],
            rgb_channels: 3,
            seed: 0,
            style_gain: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("channels must list at least the 4x4 resolution".into()));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("every channel count must be at least 1".into()));
        }
        if self.rgb_channels == 0 {
            return Err(Error::Config("rgb_channels must be at least 1".into()));
        }
        if !(self.style_gain.is_finite() && self.style_gain >= 0.0) {
            return Err(Error::Config("style_gain must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn resolution(&self) -> usize {
        4 << (self.channels.len() - 1)
    }

    pub fn num_feature_convs(&self) -> usize {
        2 * self.channels.len() - 1
    }

    /// Number of per-layer latents consumed by style mixing.
    pub fn num_ws(&self) -> usize {
        self.num_feature_convs() + 1
    }
}

/// Total length of the domain vector: the sum of feature-conv input channels.
pub fn domain_dimension(config: &GeneratorConfig) -> usize {
    LayerLayout::from_config(config).total_dim()
}

/// One feature convolution as seen by the domain vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSlot {
    pub index: usize,
    pub resolution: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub offset: usize,
}

/// Ordered feature-convolution table and the slicing of a flat domain vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    layers: Vec<LayerSlot>,
    total_dim: usize,
}

impl LayerLayout {
    pub fn from_config(config: &GeneratorConfig) -> Self {
        Self::from_channels(&config.channels)
    }

    pub fn from_channels(channels: &[usize]) -> Self {
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |resolution: usize, in_channels: usize, out_channels: usize| {
            layers.push(LayerSlot {
                index: layers.len(),
                resolution,
                in_channels,
                out_channels,
                offset,
            });
            offset += in_channels;
        };
        for (r, &c) in channels.iter().enumerate() {
            let res = 4 << r;
            if r == 0 {
                push(res, c, c);
            } else {
                push(res, channels[r - 1], c);
                push(res, c, c);
            }
        }
        Self {
            layers,
            total_dim: offset,
        }
    }

    /// Builds a layout directly from per-layer widths (used by the
    /// hypernetwork when it is configured without a generator).
    pub fn from_widths(widths: &[usize]) -> Self {
        let mut offset = 0;
        let layers = widths
            .iter()
            .enumerate()
            .map(|(index, &w)| {
                let slot = LayerSlot {
                    index,
                    resolution: 0,
                    in_channels: w,
                    out_channels: 0,
                    offset,
                };
                offset += w;
                slot
            })
            .collect();
        Self {
            layers,
            total_dim: offset,
        }
    }

    pub fn layers(&self) -> &[LayerSlot] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.in_channels).collect()
    }

    pub fn slice<'a>(&self, flat: &'a [f64], layer: usize) -> &'a [f64] {
        let l = &self.layers[layer];
        &flat[l.offset..l.offset + l.in_channels]
    }

    /// Splits a flat vector into per-layer slices.
    pub fn split<'a>(&self, flat: &'a [f64]) -> Result<Vec<&'a [f64]>> {
        if flat.len() != self.total_dim {
            return Err(shape_err(format!(
                "flat vector has length {} but the layout needs {}",
                flat.len(),
                self.total_dim
            )));
        }
        Ok((0..self.layers.len()).map(|l| self.slice(flat, l)).collect())
    }

    /// Inverse of [`LayerLayout::split`].
    pub fn concat(&self, slices: &[&[f64]]) -> Result<Vec<f64>> {
        if slices.len() != self.layers.len() {
            return Err(shape_err(format!(
                "expected {} slices, got {}",
                self.layers.len(),
                slices.len()
            )));
        }
        let mut out = Vec::with_capacity(self.total_dim);
        for (slot, s) in self.layers.iter().zip(slices) {
            if s.len() != slot.in_channels {
                return Err(shape_err(format!(
                    "slice {} has length {} but the layer has {} input channels",
                    slot.index,
                    s.len(),
                    slot.in_channels
                )));
            }
            out.extend_from_slice(s);
        }
        Ok(out)
    }
}

/// Per-layer channel scaling vector `d`, the trainable object of
/// domain-modulation fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainVector {
    values: Vec<f64>,
    layout: LayerLayout,
}

impl DomainVector {
    /// The identity adaptation: all channels scaled by one.
    pub fn ones(layout: &LayerLayout) -> Self {
        Self {
            values: vec![1.0; layout.total_dim()],
            layout: layout.clone(),
        }
    }

    pub fn from_values(layout: &LayerLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_dim() {
            return Err(shape_err(format!(
                "domain vector has length {} but the layout needs {}",
                values.len(),
                layout.total_dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("domain vector has non-finite entries".into()));
        }
        Ok(Self {
            values,
            layout: layout.clone(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &LayerLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, layer: usize) -> &[f64] {
        self.layout.slice(&self.values, layer)
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        (0..self.layout.num_layers()).map(|l| self.slice(l)).collect()
    }
}

/// Identifies the consumer of a style vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StyleLayer {
    Conv(usize),
    ToRgb(usize),
}

/// Per-layer intermediate latents, optionally produced by style mixing.
#[derive(Clone, Debug, PartialEq)]
pub struct WPlus {
    pub layers: Vec<Vec<f64>>,
    /// First layer index taking the second latent, when mixing happened.
    pub crossover: Option<usize>,
}

impl WPlus {
    pub fn broadcast(w: &[f64], num_ws: usize) -> Self {
        Self {
            layers: vec![w.to_vec(); num_ws],
            crossover: None,
        }
    }
}

/// Style vectors for every feature convolution and toRGB layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Styles {
    pub conv: Vec<Vec<f64>>,
    pub rgb: Vec<Vec<f64>>,
}

/// Mixes two latents: with probability `prob` a crossover layer `t` is drawn
/// uniformly from `1..num_ws` and layers `>= t` take `w2`; otherwise every
/// layer takes `w1`.
pub fn style_mix<R: Rng + ?Sized>(w1: &[f64], w2: &[f64], num_ws: usize, prob: f64, rng: &mut R) -> Result<WPlus> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::Input(format!(
            "mixing probability must lie in [0, 1], got {prob}"
        )));
    }
    if w1.len() != w2.len() {
        return Err(shape_err("style mixing latents differ in length"));
    }
    let u: f64 = rng.random();
    if u < prob && num_ws >= 2 {
        let t = rng.random_range(1..num_ws);
        let layers = (0..num_ws)
            .map(|l| if l < t { w1.to_vec() } else { w2.to_vec() })
            .collect();
        Ok(WPlus {
            layers,
            crossover: Some(t),
        })
    } else {
        Ok(WPlus::broadcast(w1, num_ws))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthLayer {
    pub weight: ConvWeight,
    pub bias: Array1<f64>,
    pub affine: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub mapping: Vec<Dense>,
    /// Learned input tensor at 4×4.
    pub constant: Array3<f64>,
    pub convs: Vec<SynthLayer>,
    pub to_rgb: Vec<SynthLayer>,
}

/// Parameter counts split by generator part.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParameterCounts {
    pub mapping: usize,
    pub affine: usize,
    /// Feature convolution weights and biases plus the constant input.
    pub synthesis: usize,
    pub to_rgb: usize,
}

impl ParameterCounts {
    /// Closed-form counts; agrees with [`Generator::count_parameters`].
    pub fn from_config(config: &GeneratorConfig) -> Self {
        let layout = LayerLayout::from_config(config);
        let z = config.latent_dim;
        let mapping = config.mapping_layers * (z * z + z);
        let rgb_affine: usize = config.channels.iter().map(|&c| z * c + c).sum();
        let conv_affine: usize = layout.layers().iter().map(|l| z * l.in_channels + l.in_channels).sum();
        let conv: usize = layout
            .layers()
            .iter()
            .map(|l| l.out_channels * l.in_channels * 9 + l.out_channels)
            .sum();
        let constant = config.channels[0] * 16;
        let to_rgb = config
            .channels
            .iter()
            .map(|&c| config.rgb_channels * c + config.rgb_channels)
            .sum();
        Self {
            mapping,
            affine: conv_affine + rgb_affine,
            synthesis: conv + constant,
            to_rgb,
        }
    }

    pub fn total(&self) -> usize {
        self.mapping + self.affine + self.synthesis + self.to_rgb
    }
}

/// Saved activations of one traced synthesis pass.
#[derive(Clone, Debug)]
pub struct SynthesisTape {
    convs: Vec<(ModConvTape, Array3<f64>)>,
    rgbs: Vec<ModConvTape>,
}

/// Gradients with respect to the synthesis weights (full fine-tuning).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisWeightGrads {
    pub constant: Array3<f64>,
    pub conv_weights: Vec<Array4<f64>>,
    pub conv_biases: Vec<Array1<f64>>,
}

#[derive(Clone, Debug)]
pub struct SynthesisGrads {
    /// Flat gradient w.r.t. the domain vector (at all-ones when absent).
    pub domain: Vec<f64>,
    pub conv_styles: Vec<Vec<f64>>,
    pub rgb_styles: Vec<Vec<f64>>,
    pub weights: Option<SynthesisWeightGrads>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    layout: LayerLayout,
    params: GeneratorParams,
}

impl Generator {
    /// Seeded initialization.
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let layout = LayerLayout::from_config(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let z = config.latent_dim;
        let mapping = (0..config.mapping_layers)
            .map(|_| Dense::gaussian(&mut rng, z, z, 1.0 / (z as f64).sqrt(), 0.0))
            .collect();
        let c0 = config.channels[0];
        let constant = Array3::from_shape_vec((c0, 4, 4), standard_normal_vec(&mut rng, c0 * 16)).unwrap();
        let affine_std = config.style_gain / (z as f64).sqrt();
        let mut convs = Vec::with_capacity(layout.num_layers());
        for slot in layout.layers() {
            let fan_in = (slot.in_channels * 9) as f64;
            let weight = gaussian4(
                &mut rng,
                (slot.out_channels, slot.in_channels, 3, 3),
                1.0 / fan_in.sqrt(),
            );
            convs.push(SynthLayer {
                weight: ConvWeight::new(weight)?,
                bias: Array1::zeros(slot.out_channels),
                affine: Dense::gaussian(&mut rng, z, slot.in_channels, affine_std, 1.0),
            });
        }
        let mut to_rgb = Vec::with_capacity(config.channels.len());
        for &c in &config.channels {
            let weight = gaussian4(&mut rng, (config.rgb_channels, c, 1, 1), 0.5 / (c as f64).sqrt());
            to_rgb.push(SynthLayer {
                weight: ConvWeight::new(weight)?,
                bias: Array1::zeros(config.rgb_channels),
                affine: Dense::gaussian(&mut rng, z, c, affine_std, 1.0),
            });
        }
        Ok(Self {
            config,
            layout,
            params: GeneratorParams {
                mapping,
                constant,
                convs,
                to_rgb,
            },
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn layout(&self) -> &LayerLayout {
        &self.layout
    }

    pub fn params(&self) -> &GeneratorParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut GeneratorParams {
        &mut self.params
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution()
    }

    pub fn num_ws(&self) -> usize {
        self.config.num_ws()
    }

    pub fn count_parameters(&self) -> ParameterCounts {
        let p = &self.params;
        ParameterCounts {
            mapping: p.mapping.iter().map(Dense::num_parameters).sum(),
            affine: p.convs.iter().chain(&p.to_rgb).map(|l| l.affine.num_parameters()).sum(),
            synthesis: p.constant.len()
                + p.convs
                    .iter()
                    .map(|l| l.weight.values().len() + l.bias.len())
                    .sum::<usize>(),
            to_rgb: p.to_rgb.iter().map(|l| l.weight.values().len() + l.bias.len()).sum(),
        }
    }

    pub fn sample_z<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        standard_normal_vec(rng, self.config.latent_dim)
    }

    /// Mapping network `M(z)`: fully connected layers with leaky ReLU between
    /// them. Zero layers is the identity.
    pub fn mapping_forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.config.latent_dim {
            return Err(shape_err(format!(
                "latent has length {} but latent_dim is {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        let mut h = Array1::from(z.to_vec());
        let n = self.params.mapping.len();
        for (i, layer) in self.params.mapping.iter().enumerate() {
            h = layer.forward(h.view());
            if i + 1 < n {
                h.mapv_inplace(leaky_relu);
            }
        }
        Ok(h.to_vec())
    }

    /// Mean of `samples` mapped latents.
    pub fn mean_w<R: Rng + ?Sized>(&self, samples: usize, rng: &mut R) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.config.latent_dim];
        for _ in 0..samples {
            let w = self.mapping_forward(&self.sample_z(rng))?;
            acc.iter_mut().zip(&w).for_each(|(a, v)| *a += v);
        }
        let n = samples.max(1) as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }

    fn style_affine(&self, layer: StyleLayer) -> Result<&Dense> {
        match layer {
            StyleLayer::Conv(l) => self.params.convs.get(l),
            StyleLayer::ToRgb(r) => self.params.to_rgb.get(r),
        }
        .map(|l| &l.affine)
        .ok_or_else(|| Error::Input(format!("style layer {layer:?} out of range")))
    }

    /// Index into a [`WPlus`] consumed by the given layer.
    pub fn ws_index(&self, layer: StyleLayer) -> usize {
        match layer {
            StyleLayer::Conv(l) => l,
            StyleLayer::ToRgb(r) => 2 * r + 1,
        }
    }

    /// `s = A w + b` for one layer.
    pub fn affine_style(&self, w: &[f64], layer: StyleLayer) -> Result<Vec<f64>> {
        let affine = self.style_affine(layer)?;
        if w.len() != affine.inputs() {
            return Err(shape_err("intermediate latent length does not match latent_dim"));
        }
        Ok(affine.forward(ndarray::ArrayView1::from(w)).to_vec())
    }

    pub fn styles(&self, wplus: &WPlus) -> Result<Styles> {
        if wplus.layers.len() != self.num_ws() {
            return Err(shape_err(format!(
                "expected {} per-layer latents, got {}",
                self.num_ws(),
                wplus.layers.len()
            )));
        }
        let conv = (0..self.params.convs.len())
            .map(|l| {
                let layer = StyleLayer::Conv(l);
                self.affine_style(&wplus.layers[self.ws_index(layer)], layer)
            })
            .collect::<Result<_>>()?;
        let rgb = (0..self.params.to_rgb.len())
            .map(|r| {
                let layer = StyleLayer::ToRgb(r);
                self.affine_style(&wplus.layers[self.ws_index(layer)], layer)
            })
            .collect::<Result<_>>()?;
        Ok(Styles { conv, rgb })
    }

    /// Pulls style gradients back to per-layer latent gradients.
    pub fn latent_grads(&self, grads: &SynthesisGrads) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.config.latent_dim]; self.num_ws()];
        let pairs = grads
            .conv_styles
            .iter()
            .enumerate()
            .map(|(l, g)| (StyleLayer::Conv(l), g))
            .chain(
                grads
                    .rgb_styles
                    .iter()
                    .enumerate()
                    .map(|(r, g)| (StyleLayer::ToRgb(r), g)),
            );
        for (layer, g) in pairs {
            let affine = self.style_affine(layer).expect("valid layer");
            let dw = affine.weight.t().dot(&ndarray::ArrayView1::from(g.as_slice()));
            out[self.ws_index(layer)]
                .iter_mut()
                .zip(dw.iter())
                .for_each(|(a, b)| *a += b);
        }
        out
    }

    fn check_styles(&self, styles: &Styles) -> Result<()> {
        if styles.conv.len() != self.params.convs.len() || styles.rgb.len() != self.params.to_rgb.len() {
            return Err(shape_err("styles do not cover every synthesis layer"));
        }
        Ok(())
    }

    fn check_domain(&self, d: Option<&DomainVector>) -> Result<()> {
        if let Some(d) = d {
            if d.layout() != &self.layout {
                return Err(shape_err("domain vector layout does not match the generator"));
            }
        }
        Ok(())
    }

    /// Renders one image from per-layer styles; `d = None` is the source
    /// generator and is bitwise equal to `d = ones`.
    pub fn synthesize(&self, styles: &Styles, d: Option<&DomainVector>) -> Result<Image> {
        Ok(self.synthesize_traced(styles, d)?.0)
    }

    pub fn synthesize_batch(&self, styles: &[Styles], d: Option<&DomainVector>) -> Result<Array4<f64>> {
        let res = self.resolution();
        let mut out = Array4::zeros((styles.len(), self.config.rgb_channels, res, res));
        for (s, mut dst) in styles.iter().zip(out.outer_iter_mut()) {
            dst.assign(&self.synthesize(s, d)?);
        }
        Ok(out)
    }

    /// Renders from a single (unmixed) latent `w`.
    pub fn synthesize_w(&self, w: &[f64], d: Option<&DomainVector>) -> Result<Image> {
        let styles = self.styles(&WPlus::broadcast(w, self.num_ws()))?;
        self.synthesize(&styles, d)
    }

    pub fn synthesize_traced(&self, styles: &Styles, d: Option<&DomainVector>) -> Result<(Image, SynthesisTape)> {
        self.check_styles(styles)?;
        self.check_domain(d)?;
        let feat_cfg = ModConvConfig::default();
        let rgb_cfg = ModConvConfig::to_rgb();
        let mut tape = SynthesisTape {
            convs: Vec::with_capacity(self.params.convs.len()),
            rgbs: Vec::with_capacity(self.params.to_rgb.len()),
        };
        let mut x = self.params.constant.clone();
        let mut image: Option<Image> = None;
        for r in 0..self.config.channels.len() {
            if r > 0 {
                x = upsample2(x.view());
            }
            for l in conv_ids(r) {
                let layer = &self.params.convs[l];
                let slice = d.map(|d| d.slice(l));
                let (y, t) = mod_conv_traced(x.view(), &layer.weight, &styles.conv[l], slice, &feat_cfg)?;
                let pre = add_channel_bias(y, &layer.bias);
                x = pre.mapv(|v| leaky_relu(v) * SQRT_2);
                tape.convs.push((t, pre));
            }
            let layer = &self.params.to_rgb[r];
            let (rgb, t) = mod_conv_traced(x.view(), &layer.weight, &styles.rgb[r], None, &rgb_cfg)?;
            let rgb = add_channel_bias(rgb, &layer.bias);
            tape.rgbs.push(t);
            image = Some(match image {
                None => rgb,
                Some(prev) => upsample2(prev.view()) + rgb,
            });
        }
        Ok((image.expect("at least one resolution"), tape))
    }

    /// Reverse pass of [`Generator::synthesize_traced`] for `∂L/∂image`.
    pub fn backward(&self, tape: &SynthesisTape, grad_image: ArrayView3<f64>, want_weights: bool) -> SynthesisGrads {
        let levels = self.config.channels.len();
        let n_convs = self.params.convs.len();
        let mut domain = vec![0.0; self.layout.total_dim()];
        let mut conv_styles = vec![Vec::new(); n_convs];
        let mut rgb_styles = vec![Vec::new(); levels];
        let mut weights = want_weights.then(|| SynthesisWeightGrads {
            constant: Array3::zeros(self.params.constant.dim()),
            conv_weights: vec![Array4::zeros((0, 0, 0, 0)); n_convs],
            conv_biases: vec![Array1::zeros(0); n_convs],
        });

        let mut d_img = grad_image.to_owned();
        let mut from_above: Option<Array3<f64>> = None;
        for r in (0..levels).rev() {
            let g = tape.rgbs[r].backward(&self.params.to_rgb[r].weight, d_img.view());
            rgb_styles[r] = g.style;
            let mut dfeat = g.input;
            if let Some(a) = from_above.take() {
                dfeat += &a;
            }
            for l in conv_ids(r).into_iter().rev() {
                let (ct, pre) = &tape.convs[l];
                let mut dpre = dfeat;
                Zip::from(&mut dpre)
                    .and(pre)
                    .for_each(|g, &p| *g *= SQRT_2 * leaky_relu_grad(p));
                let g = ct.backward(&self.params.convs[l].weight, dpre.view());
                let slot = &self.layout.layers()[l];
                domain[slot.offset..slot.offset + slot.in_channels].copy_from_slice(&g.domain);
                conv_styles[l] = g.style;
                if let Some(w) = weights.as_mut() {
                    w.conv_biases[l] = dpre.sum_axis(Axis(2)).sum_axis(Axis(1));
                    w.conv_weights[l] = g.weight;
                }
                dfeat = g.input;
            }
            if r > 0 {
                from_above = Some(downsum2(dfeat.view()));
                d_img = downsum2(d_img.view());
            } else if let Some(w) = weights.as_mut() {
                w.constant = dfeat;
            }
        }
        SynthesisGrads {
            domain,
            conv_styles,
            rgb_styles,
            weights,
        }
    }

    /// Names and values of the tensors unlocked by full fine-tuning, in a
    /// fixed order.
    pub fn synthesis_tensors(&self) -> Vec<(String, &[f64])> {
        let p = &self.params;
        let mut out = vec![("synthesis.constant".to_string(), p.constant.as_slice().unwrap())];
        for (l, layer) in p.convs.iter().enumerate() {
            out.push((
                format!("synthesis.conv{l}.weight"),
                layer.weight.values().as_slice().unwrap(),
            ));
            out.push((format!("synthesis.conv{l}.bias"), layer.bias.as_slice().unwrap()));
        }
        out
    }

    pub fn synthesis_flat(&self) -> Vec<f64> {
        self.synthesis_tensors()
            .into_iter()
            .flat_map(|(_, v)| v.iter().copied())
            .collect()
    }

    pub fn set_synthesis_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.count_parameters().synthesis;
        if flat.len() != expected {
            return Err(shape_err(format!(
                "synthesis vector has length {} but the generator has {expected}",
                flat.len()
            )));
        }
        let p = &mut self.params;
        let mut rest = flat;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        take(p.constant.as_slice_mut().unwrap());
        for layer in &mut p.convs {
            take(layer.weight.values_mut().as_slice_mut().unwrap());
            take(layer.bias.as_slice_mut().unwrap());
        }
        Ok(())
    }
}

impl SynthesisWeightGrads {
    /// Flattened in the order of [`Generator::synthesis_tensors`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.constant.iter().copied().collect();
        for (w, b) in self.conv_weights.iter().zip(&self.conv_biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

fn conv_ids(level: usize) -> Vec<usize> {
    if level == 0 {
        vec![0]
    } else {
        vec![2 * level - 1, 2 * level]
    }
}

fn add_channel_bias(mut y: Array3<f64>, bias: &Array1<f64>) -> Array3<f64> {
    for (mut plane, &b) in y.outer_iter_mut().zip(bias.iter()) {
        if b != 0.0 {
            plane.mapv_inplace(|v| v + b);
        }
    }
    y
}

fn gaussian4<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize, usize, usize), std: f64) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Maps raw generator output to [0, 1] for file emission.
pub fn to_unit_range(v: f64) -> f64 {
    (v.clamp(-1.0, 1.0) + 1.0) / 2.0
}
