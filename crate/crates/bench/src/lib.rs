//! Seeded fixtures shared by the benchmarks.

use hyperdomain::generator::{Styles, WPlus};
use hyperdomain::{ConvWeight, DomainVector, Generator, GeneratorConfig, HdnConfig, HdnParams};
use ndarray::{Array4, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct ConvFixture {
    pub x: Array4<f64>,
    pub weight: ConvWeight,
    pub style: Vec<f64>,
    pub domain: Vec<f64>,
}

/// A `channels → channels` 3×3 convolution over a `res × res` map.
pub fn conv_fixture(channels: usize, res: usize, seed: u64) -> ConvFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = move || rng.random_range(-1.0..1.0);
    ConvFixture {
        x: Array4::from_shape_simple_fn((1, channels, res, res), &mut uniform),
        weight: ConvWeight::new(Array4::from_shape_simple_fn((channels, channels, 3, 3), &mut uniform)).unwrap(),
        style: (0..channels).map(|_| 1.0 + 0.5 * uniform()).collect(),
        domain: (0..channels).map(|_| 1.0 + 0.1 * uniform()).collect(),
    }
}

pub struct SynthesisFixture {
    pub generator: Generator,
    pub styles: Styles,
    pub domain: DomainVector,
}

pub fn synthesis_fixture(seed: u64) -> SynthesisFixture {
    let generator = Generator::new(GeneratorConfig::toy()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = generator.mapping_forward(&generator.sample_z(&mut rng)).unwrap();
    let styles = generator.styles(&WPlus::broadcast(&w, generator.num_ws())).unwrap();
    let values = (0..generator.layout().total_dim())
        .map(|_| rng.random_range(0.8..1.2))
        .collect();
    let domain = DomainVector::from_values(generator.layout(), values).unwrap();
    SynthesisFixture {
        generator,
        styles,
        domain,
    }
}

/// Toy hypernetwork with perturbed weights and a unit input embedding.
pub fn hdn_fixture(seed: u64) -> (HdnParams, Vec<f64>) {
    let generator = Generator::new(GeneratorConfig::toy()).unwrap();
    let cfg = HdnConfig::toy();
    let mut params = HdnParams::new(&cfg, generator.layout()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = params
        .flatten()
        .iter()
        .map(|v| v + 0.01 * rng.random_range(-1.0..1.0))
        .collect();
    params.set_flat(&flat).unwrap();
    let e: Vec<f64> = (0..cfg.embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    (params, e.into_iter().map(|v| v / norm).collect())
}

/// First sample of a batch as a single feature map.
pub fn first_sample(x: &Array4<f64>) -> ArrayView3<'_, f64> {
    x.index_axis(ndarray::Axis(0), 0)
}
