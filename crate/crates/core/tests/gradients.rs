//! Analytic backward passes against central finite differences.

use hyperdomain::embedding::Encoder;
use hyperdomain::generator::{Styles, WPlus};
use hyperdomain::modconv::mod_conv_traced;
use hyperdomain::{
    ConvWeight, DomainVector, Generator, GeneratorConfig, HdnConfig, HdnParams, MockEncoder, ModConvConfig,
};
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn assert_close(what: &str, analytic: f64, fd: f64) {
    let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
    assert!(rel < TOL, "{what}: analytic {analytic} vs fd {fd} (rel {rel:.2e})");
}

fn dot3(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[test]
fn modulated_conv_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (o, c, k, res) = (5, 4, 3, 8);
    let w = ConvWeight::new(Array4::from_shape_simple_fn((o, c, k, k), || normal(&mut rng))).unwrap();
    let x = Array3::from_shape_simple_fn((c, res, res), || normal(&mut rng));
    let s: Vec<f64> = (0..c).map(|_| 1.0 + 0.3 * normal(&mut rng)).collect();
    let d: Vec<f64> = (0..c).map(|_| 1.0 + 0.3 * normal(&mut rng)).collect();
    let g = Array3::from_shape_simple_fn((o, res, res), || normal(&mut rng));

    for cfg in [ModConvConfig::default(), ModConvConfig::to_rgb()] {
        let loss = |x: &Array3<f64>, w: &ConvWeight, s: &[f64], d: &[f64]| {
            dot3(&mod_conv_traced(x.view(), w, s, Some(d), &cfg).unwrap().0, &g)
        };
        let (_, tape) = mod_conv_traced(x.view(), &w, &s, Some(&d), &cfg).unwrap();
        let grads = tape.backward(&w, g.view());
        for i in 0..c {
            let (mut sp, mut sm) = (s.clone(), s.clone());
            sp[i] += H;
            sm[i] -= H;
            assert_close(
                "style",
                grads.style[i],
                (loss(&x, &w, &sp, &d) - loss(&x, &w, &sm, &d)) / (2.0 * H),
            );
            let (mut dp, mut dm) = (d.clone(), d.clone());
            dp[i] += H;
            dm[i] -= H;
            assert_close(
                "domain",
                grads.domain[i],
                (loss(&x, &w, &s, &dp) - loss(&x, &w, &s, &dm)) / (2.0 * H),
            );
        }
        for _ in 0..10 {
            let idx = (
                rng.random_range(0..c),
                rng.random_range(0..res),
                rng.random_range(0..res),
            );
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[[idx.0, idx.1, idx.2]] += H;
            xm[[idx.0, idx.1, idx.2]] -= H;
            assert_close(
                "input",
                grads.input[[idx.0, idx.1, idx.2]],
                (loss(&xp, &w, &s, &d) - loss(&xm, &w, &s, &d)) / (2.0 * H),
            );

            let widx = [
                rng.random_range(0..o),
                rng.random_range(0..c),
                rng.random_range(0..k),
                rng.random_range(0..k),
            ];
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.values_mut()[widx] += H;
            wm.values_mut()[widx] -= H;
            assert_close(
                "weight",
                grads.weight[widx],
                (loss(&x, &wp, &s, &d) - loss(&x, &wm, &s, &d)) / (2.0 * H),
            );
        }
    }
}

fn toy_setup(seed: u64) -> (Generator, Styles, DomainVector, Array3<f64>) {
    let gen = Generator::new(GeneratorConfig::toy()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = gen.mapping_forward(&gen.sample_z(&mut rng)).unwrap();
    let styles = gen.styles(&WPlus::broadcast(&w, gen.num_ws())).unwrap();
    let values = (0..gen.layout().total_dim())
        .map(|_| 1.0 + 0.2 * normal(&mut rng))
        .collect();
    let d = DomainVector::from_values(gen.layout(), values).unwrap();
    let res = gen.resolution();
    let g = Array3::from_shape_simple_fn((3, res, res), || normal(&mut rng));
    (gen, styles, d, g)
}

#[test]
fn synthesis_backward_domain_and_styles() {
    let (gen, styles, d, g) = toy_setup(2);
    let loss = |st: &Styles, d: &DomainVector| dot3(&gen.synthesize(st, Some(d)).unwrap(), &g);
    let (_, tape) = gen.synthesize_traced(&styles, Some(&d)).unwrap();
    let grads = gen.backward(&tape, g.view(), false);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let i = rng.random_range(0..d.len());
        let (mut dp, mut dm) = (d.clone(), d.clone());
        dp.values_mut()[i] += H;
        dm.values_mut()[i] -= H;
        assert_close(
            "domain",
            grads.domain[i],
            (loss(&styles, &dp) - loss(&styles, &dm)) / (2.0 * H),
        );
    }
    for l in [0, 3, 6] {
        let i = rng.random_range(0..styles.conv[l].len());
        let (mut sp, mut sm) = (styles.clone(), styles.clone());
        sp.conv[l][i] += H;
        sm.conv[l][i] -= H;
        assert_close(
            "conv style",
            grads.conv_styles[l][i],
            (loss(&sp, &d) - loss(&sm, &d)) / (2.0 * H),
        );
    }
    for r in 0..styles.rgb.len() {
        let (mut sp, mut sm) = (styles.clone(), styles.clone());
        sp.rgb[r][0] += H;
        sm.rgb[r][0] -= H;
        assert_close(
            "rgb style",
            grads.rgb_styles[r][0],
            (loss(&sp, &d) - loss(&sm, &d)) / (2.0 * H),
        );
    }
}

#[test]
fn synthesis_backward_weights() {
    let (gen, styles, d, g) = toy_setup(4);
    let (_, tape) = gen.synthesize_traced(&styles, Some(&d)).unwrap();
    let grads = gen.backward(&tape, g.view(), true);
    let wg = grads.weights.expect("weight gradients requested");
    let base = gen.synthesis_flat();
    let mut analytic = wg.constant.iter().copied().collect::<Vec<_>>();
    for (w, b) in wg.conv_weights.iter().zip(&wg.conv_biases) {
        analytic.extend(w.iter());
        analytic.extend(b.iter());
    }
    assert_eq!(
        analytic.len(),
        base.len(),
        "flat layout follows constant, then weight and bias per conv"
    );
    let mut probe = gen.clone();
    let mut loss = |flat: &[f64]| {
        probe.set_synthesis_flat(flat).unwrap();
        dot3(&probe.synthesize(&styles, Some(&d)).unwrap(), &g)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..15 {
        let i = rng.random_range(0..base.len());
        let (mut p, mut m) = (base.clone(), base.clone());
        p[i] += H;
        m[i] -= H;
        assert_close("synthesis weight", analytic[i], (loss(&p) - loss(&m)) / (2.0 * H));
    }
}

#[test]
fn latent_gradients() {
    let (gen, _, d, g) = toy_setup(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = gen.mapping_forward(&gen.sample_z(&mut rng)).unwrap();
    let wplus = WPlus::broadcast(&w, gen.num_ws());
    let loss = |wp: &WPlus| dot3(&gen.synthesize(&gen.styles(wp).unwrap(), Some(&d)).unwrap(), &g);
    let (_, tape) = gen.synthesize_traced(&gen.styles(&wplus).unwrap(), Some(&d)).unwrap();
    let per_layer = gen.latent_grads(&gen.backward(&tape, g.view(), false));
    for layer in [0, 1, gen.num_ws() - 1] {
        let i = rng.random_range(0..w.len());
        let (mut p, mut m) = (wplus.clone(), wplus.clone());
        p.layers[layer][i] += H;
        m.layers[layer][i] -= H;
        assert_close("latent", per_layer[layer][i], (loss(&p) - loss(&m)) / (2.0 * H));
    }
}

#[test]
fn mock_encoder_vjp() {
    let enc = MockEncoder::new(9, 32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = Array3::from_shape_simple_fn((3, 32, 32), || 0.5 * normal(&mut rng));
    let g: Vec<f64> = (0..32).map(|_| normal(&mut rng)).collect();
    let loss = |im: &Array3<f64>| -> f64 {
        let e = enc.encode_image(im.view()).unwrap();
        e.as_slice().iter().zip(&g).map(|(a, b)| a * b).sum()
    };
    let vjp = enc.image_vjp(img.view(), &g).unwrap();
    for _ in 0..10 {
        let idx = [rng.random_range(0..3), rng.random_range(0..32), rng.random_range(0..32)];
        let (mut p, mut m) = (img.clone(), img.clone());
        p[idx] += H;
        m[idx] -= H;
        assert_close("pixel", vjp[idx], (loss(&p) - loss(&m)) / (2.0 * H));
    }
}

#[test]
fn hypernetwork_backward() {
    let gen = Generator::new(GeneratorConfig::toy()).unwrap();
    let cfg = HdnConfig {
        hidden_dim: 24,
        backbone_blocks: 2,
        head_blocks: 2,
        ..HdnConfig::toy()
    };
    let mut params = HdnParams::new(&cfg, gen.layout()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    // Break the zero-initialized output layers so every path carries gradient.
    let mut flat = params.flatten();
    flat.iter_mut().for_each(|v| *v += 0.05 * normal(&mut rng));
    params.set_flat(&flat).unwrap();

    let e: Vec<f64> = (0..cfg.embed_dim).map(|_| normal(&mut rng)).collect();
    let gd: Vec<f64> = (0..gen.layout().total_dim()).map(|_| normal(&mut rng)).collect();
    let loss =
        |p: &HdnParams, e: &[f64]| -> f64 { p.forward(e).unwrap().values().iter().zip(&gd).map(|(a, b)| a * b).sum() };
    let (_, tape) = params.forward_traced(&e).unwrap();
    let mut grad = params.zeros_like();
    let de = params.backward(&tape, &gd, &mut grad).unwrap();
    let g = grad.flatten();

    let mut probe = params.clone();
    for _ in 0..20 {
        let i = rng.random_range(0..flat.len());
        let (mut p, mut m) = (flat.clone(), flat.clone());
        p[i] += H;
        m[i] -= H;
        probe.set_flat(&p).unwrap();
        let lp = loss(&probe, &e);
        probe.set_flat(&m).unwrap();
        let lm = loss(&probe, &e);
        assert_close("hdn parameter", g[i], (lp - lm) / (2.0 * H));
    }
    for i in 0..5 {
        let (mut p, mut m) = (e.clone(), e.clone());
        p[i] += H;
        m[i] -= H;
        assert_close("hdn input", de[i], (loss(&params, &p) - loss(&params, &m)) / (2.0 * H));
    }
}
