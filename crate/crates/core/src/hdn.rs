//! Hypernetwork mapping a text embedding to a [`DomainVector`].
//!
//! An input projection feeds a stack of shared residual blocks; one head per
//! generator layer (its own residual blocks plus an output layer) predicts
//! that layer's domain slice. Output layers start at zero weight and unit
//! bias, so a fresh network predicts the all-ones vector for any input.

use ndarray::{Array1, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::generator::{DomainVector, LayerLayout};
use crate::nn::{leaky_relu, leaky_relu_grad, Dense};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HdnConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub backbone_blocks: usize,
    pub head_blocks: usize,
    pub seed: u64,
}

impl Default for HdnConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl HdnConfig {
    pub fn toy() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 128,
            backbone_blocks: 10,
            head_blocks: 5,
            seed: 0,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            embed_dim: 512,
            hidden_dim: 512,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("hypernetwork dims must be at least 1".into()));
        }
        Ok(())
    }
}

/// Pre-norm residual block: `x + fc2(lrelu(fc1(norm(x))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlockParams {
    pub norm_scale: Array1<f64>,
    pub norm_shift: Array1<f64>,
    pub fc1: Dense,
    pub fc2: Dense,
}

impl ResBlockParams {
    fn init(rng: &mut ChaCha8Rng, h: usize) -> Self {
        let std = 1.0 / (h as f64).sqrt();
        Self {
            norm_scale: Array1::ones(h),
            norm_shift: Array1::zeros(h),
            fc1: Dense::gaussian(rng, h, h, std, 0.0),
            fc2: Dense::gaussian(rng, h, h, 0.5 * std, 0.0),
        }
    }

    pub fn zeros(h: usize) -> Self {
        Self {
            norm_scale: Array1::zeros(h),
            norm_shift: Array1::zeros(h),
            fc1: Dense::zeros(h, h),
            fc2: Dense::zeros(h, h),
        }
    }

    pub fn dim(&self) -> usize {
        self.norm_scale.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.norm_scale.len() + self.norm_shift.len() + self.fc1.num_parameters() + self.fc2.num_parameters()
    }

    fn tensors(&self) -> [&[f64]; 6] {
        let [w1, b1] = self.fc1.tensors();
        let [w2, b2] = self.fc2.tensors();
        [
            self.norm_scale.as_slice().unwrap(),
            self.norm_shift.as_slice().unwrap(),
            w1,
            b1,
            w2,
            b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        let [w1, b1] = self.fc1.tensors_mut();
        let [w2, b2] = self.fc2.tensors_mut();
        [
            self.norm_scale.as_slice_mut().unwrap(),
            self.norm_shift.as_slice_mut().unwrap(),
            w1,
            b1,
            w2,
            b2,
        ]
    }
}

const BLOCK_TENSORS: [&str; 6] = [
    "norm.scale",
    "norm.shift",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
];

/// Saved activations of one residual block.
#[derive(Clone, Debug)]
pub struct ResBlockTape {
    x: Array1<f64>,
    xhat: Array1<f64>,
    inv_std: f64,
    normed: Array1<f64>,
    pre: Array1<f64>,
    act: Array1<f64>,
}

pub fn resblock_forward(p: &ResBlockParams, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    Ok(resblock_traced(p, x)?.0)
}

pub fn resblock_traced(p: &ResBlockParams, x: ArrayView1<f64>) -> Result<(Array1<f64>, ResBlockTape)> {
    if x.len() != p.dim() {
        return Err(shape_err(format!(
            "residual block expects {} features, got {}",
            p.dim(),
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let centered = x.mapv(|v| v - mean);
    let var = centered.dot(&centered) / n;
    let inv_std = 1.0 / (var + NORM_EPS).sqrt();
    let xhat = centered * inv_std;
    let normed = &xhat * &p.norm_scale + &p.norm_shift;
    let pre = p.fc1.forward(normed.view());
    let act = pre.mapv(leaky_relu);
    let y = &x + &p.fc2.forward(act.view());
    Ok((
        y,
        ResBlockTape {
            x: x.to_owned(),
            xhat,
            inv_std,
            normed,
            pre,
            act,
        },
    ))
}

/// Returns `∂L/∂x` and accumulates parameter gradients into `grad`.
pub fn resblock_backward(
    p: &ResBlockParams,
    tape: &ResBlockTape,
    dy: ArrayView1<f64>,
    grad: &mut ResBlockParams,
) -> Array1<f64> {
    let dact = p.fc2.backward(tape.act.view(), dy, Some(&mut grad.fc2));
    let dpre = &dact * &tape.pre.mapv(leaky_relu_grad);
    let dnormed = p.fc1.backward(tape.normed.view(), dpre.view(), Some(&mut grad.fc1));
    grad.norm_scale += &(&dnormed * &tape.xhat);
    grad.norm_shift += &dnormed;
    let dxhat = &dnormed * &p.norm_scale;
    let n = dxhat.len() as f64;
    let mean_d = dxhat.sum() / n;
    let mean_dx = dxhat.dot(&tape.xhat) / n;
    let dnorm_in = (&dxhat - mean_d - &(&tape.xhat * mean_dx)) * tape.inv_std;
    debug_assert_eq!(tape.x.len(), dy.len());
    &dy + &dnorm_in
}

#[derive(Clone, Debug, PartialEq)]
pub struct HdnHead {
    pub blocks: Vec<ResBlockParams>,
    pub out: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HdnParams {
    pub proj: Dense,
    pub backbone: Vec<ResBlockParams>,
    pub heads: Vec<HdnHead>,
    layout: LayerLayout,
}

/// Saved activations of one hypernetwork forward pass.
#[derive(Clone, Debug)]
pub struct HdnTape {
    input: Array1<f64>,
    backbone: Vec<ResBlockTape>,
    heads: Vec<(Vec<ResBlockTape>, Array1<f64>)>,
    shared: Array1<f64>,
}

/// Closed-form parameter count.
pub fn hdn_param_count(cfg: &HdnConfig, layout: &LayerLayout) -> usize {
    let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
    let block = 2 * h * h + 4 * h;
    let proj = e * h + h;
    let heads: usize = layout
        .widths()
        .iter()
        .map(|&c| cfg.head_blocks * block + h * c + c)
        .sum();
    proj + cfg.backbone_blocks * block + heads
}

impl HdnParams {
    /// Seeded initialization for the given generator layout.
    pub fn new(cfg: &HdnConfig, layout: &LayerLayout) -> Result<Self> {
        cfg.validate()?;
        if layout.num_layers() == 0 {
            return Err(Error::Config("layout has no layers".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let h = cfg.hidden_dim;
        let proj = Dense::gaussian(&mut rng, cfg.embed_dim, h, 1.0 / (cfg.embed_dim as f64).sqrt(), 0.0);
        let backbone = (0..cfg.backbone_blocks)
            .map(|_| ResBlockParams::init(&mut rng, h))
            .collect();
        let heads = layout
            .widths()
            .into_iter()
            .map(|c| {
                let blocks = (0..cfg.head_blocks)
                    .map(|_| ResBlockParams::init(&mut rng, h))
                    .collect();
                let mut out = Dense::zeros(h, c);
                out.bias.fill(1.0);
                HdnHead { blocks, out }
            })
            .collect();
        Ok(Self {
            proj,
            backbone,
            heads,
            layout: layout.clone(),
        })
    }

    /// Same shapes with every value zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let h = self.hidden_dim();
        Self {
            proj: self.proj.zeros_like(),
            backbone: self.backbone.iter().map(|_| ResBlockParams::zeros(h)).collect(),
            heads: self
                .heads
                .iter()
                .map(|hd| HdnHead {
                    blocks: hd.blocks.iter().map(|_| ResBlockParams::zeros(h)).collect(),
                    out: hd.out.zeros_like(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn layout(&self) -> &LayerLayout {
        &self.layout
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.inputs()
    }

    pub fn hidden_dim(&self) -> usize {
        self.proj.outputs()
    }

    /// Counts by walking every parameter container.
    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn forward(&self, e: &[f64]) -> Result<DomainVector> {
        Ok(self.forward_traced(e)?.0)
    }

    pub fn forward_traced(&self, e: &[f64]) -> Result<(DomainVector, HdnTape)> {
        if e.len() != self.embed_dim() {
            return Err(shape_err(format!(
                "hypernetwork expects a {}-dim embedding, got {}",
                self.embed_dim(),
                e.len()
            )));
        }
        let input = Array1::from(e.to_vec());
        let mut x = self.proj.forward(input.view());
        let mut backbone = Vec::with_capacity(self.backbone.len());
        for b in &self.backbone {
            let (y, t) = resblock_traced(b, x.view())?;
            backbone.push(t);
            x = y;
        }
        let mut values = Vec::with_capacity(self.layout.total_dim());
        let mut heads = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let mut hx = x.clone();
            let mut tapes = Vec::with_capacity(head.blocks.len());
            for b in &head.blocks {
                let (y, t) = resblock_traced(b, hx.view())?;
                tapes.push(t);
                hx = y;
            }
            values.extend(head.out.forward(hx.view()).iter());
            heads.push((tapes, hx));
        }
        let d = DomainVector::from_values(&self.layout, values)?;
        Ok((
            d,
            HdnTape {
                input,
                backbone,
                heads,
                shared: x,
            },
        ))
    }

    /// Accumulates `∂L/∂φ` into `grad` for `grad_d = ∂L/∂d`; returns
    /// `∂L/∂e`.
    pub fn backward(&self, tape: &HdnTape, grad_d: &[f64], grad: &mut HdnParams) -> Result<Vec<f64>> {
        if grad_d.len() != self.layout.total_dim() {
            return Err(shape_err("domain gradient does not match the layout"));
        }
        let slices = self.layout.split(grad_d)?;
        let mut dshared = Array1::<f64>::zeros(self.hidden_dim());
        for (l, head) in self.heads.iter().enumerate() {
            let (tapes, hx) = &tape.heads[l];
            let g = &mut grad.heads[l];
            let mut dx = head
                .out
                .backward(hx.view(), ArrayView1::from(slices[l]), Some(&mut g.out));
            for (b, (bp, bt)) in head.blocks.iter().zip(tapes).enumerate().rev() {
                dx = resblock_backward(bp, bt, dx.view(), &mut g.blocks[b]);
            }
            dshared += &dx;
        }
        let mut dx = dshared;
        for (b, (bp, bt)) in self.backbone.iter().zip(&tape.backbone).enumerate().rev() {
            dx = resblock_backward(bp, bt, dx.view(), &mut grad.backbone[b]);
        }
        debug_assert_eq!(tape.shared.len(), self.hidden_dim());
        Ok(self
            .proj
            .backward(tape.input.view(), dx.view(), Some(&mut grad.proj))
            .to_vec())
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        let [w, b] = self.proj.tensors();
        out.push(("proj.weight".to_string(), w));
        out.push(("proj.bias".to_string(), b));
        for (i, blk) in self.backbone.iter().enumerate() {
            for (name, t) in BLOCK_TENSORS.iter().zip(blk.tensors()) {
                out.push((format!("backbone.{i}.{name}"), t));
            }
        }
        for (l, head) in self.heads.iter().enumerate() {
            for (i, blk) in head.blocks.iter().enumerate() {
                for (name, t) in BLOCK_TENSORS.iter().zip(blk.tensors()) {
                    out.push((format!("head{l}.{i}.{name}"), t));
                }
            }
            let [w, b] = head.out.tensors();
            out.push((format!("head{l}.out.weight"), w));
            out.push((format!("head{l}.out.bias"), b));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(self.proj.tensors_mut());
        for blk in &mut self.backbone {
            out.extend(blk.tensors_mut());
        }
        for head in &mut self.heads {
            for blk in &mut head.blocks {
                out.extend(blk.tensors_mut());
            }
            out.extend(head.out.tensors_mut());
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_parameters();
        if flat.len() != n {
            return Err(shape_err(format!(
                "expected {n} hypernetwork parameters, got {}",
                flat.len()
            )));
        }
        let mut rest = flat;
        for t in self.tensors_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Fills tensors by name; every tensor must be present with the right
    /// length.
    pub fn set_tensors(&mut self, mut lookup: impl FnMut(&str) -> Option<Vec<f64>>) -> Result<()> {
        let names: Vec<(String, usize)> = self.tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
        let mut flat = Vec::with_capacity(self.num_parameters());
        for (name, len) in names {
            let v = lookup(&name).ok_or_else(|| shape_err(format!("missing tensor {name}")))?;
            if v.len() != len {
                return Err(shape_err(format!(
                    "tensor {name} has {} values, expected {len}",
                    v.len()
                )));
            }
            flat.extend(v);
        }
        self.set_flat(&flat)
    }
}

/// `D_φ(e)`.
pub fn hdn_forward(params: &HdnParams, e: &[f64]) -> Result<DomainVector> {
    params.forward(e)
}
