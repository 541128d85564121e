//! Acceptance suite: one printed `[PASS]`/`[FAIL]` line per criterion.
//!
//! Criteria run sequentially inside a single test so the reported runtimes
//! are not distorted by parallel test threads.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use hyperdomain::config::RunConfig;
use hyperdomain::embedding::losses::{direction_loss_grad, indomain_angle};
use hyperdomain::embedding::{
    clip_across_loss, direction_loss, diversity_from_embeddings, domain_norm_loss_grad, image_direction,
    quality_from_embeddings, text_direction, tt_direction_loss, Embedding, Encoder,
};
use hyperdomain::generator::{domain_dimension, Image, LayerLayout, ParameterCounts, WPlus};
use hyperdomain::hdn::hdn_param_count;
use hyperdomain::modconv::transform_weight;
use hyperdomain::sampler::{resample_on_sphere, sample_convex_hull, sample_dirichlet, HullSampleConfig};
use hyperdomain::trainer::{
    adapt_single_domain_text, train_hdn, DirectionObjective, HdnDomains, HdnObjective, HdnTraining, LossHistory,
    TrainingConfig, TrainingMode,
};
use hyperdomain::{
    Checkpoint, CheckpointError, CheckpointMode, ConvWeight, DomainDescriptor, DomainVector, EncoderEnsemble, Error,
    Generator, GeneratorConfig, HdnConfig, HdnParams, ModConvConfig, Result,
};
use ndarray::{Array3, Array4, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Written straight to stderr so the lines survive test output capture.
fn print_line(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = err.write_all(format!("{line}\n").as_bytes());
    let _ = err.flush();
}

fn run_criterion(id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let elapsed = start.elapsed();
    let (mut pass, mut detail) = match result {
        Ok(Ok(o)) => (o.pass, o.detail),
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(_) => (false, "panicked".to_string()),
    };
    if let Some(limit) = limit {
        if elapsed > limit {
            pass = false;
            detail.push_str(&format!("; over the {:.0} s budget", limit.as_secs_f64()));
        }
    }
    let tag = if pass { "PASS" } else { "FAIL" };
    print_line(&format!(
        "[{tag}] criterion {id:>2} {name}: {detail} ({:.2} s)",
        elapsed.as_secs_f64()
    ));
    pass
}

fn toy() -> Generator {
    Generator::new(GeneratorConfig::toy()).unwrap()
}

fn mock_ensemble() -> EncoderEnsemble {
    EncoderEnsemble::mock(&[1, 2], 64).unwrap()
}

fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-6)
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Embedding {
    Embedding::normalize((0..dim).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn seeded_styles(gen: &Generator, n: usize, seed: u64) -> Vec<hyperdomain::generator::Styles> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let w = gen.mapping_forward(&gen.sample_z(&mut rng)).unwrap();
            gen.styles(&WPlus::broadcast(&w, gen.num_ws())).unwrap()
        })
        .collect()
}

fn identity_adaptation() -> Result<Outcome> {
    let gen = toy();
    let ones = DomainVector::ones(gen.layout());
    let mut mismatched = 0;
    for s in seeded_styles(&gen, 100, 7) {
        let a = gen.synthesize(&s, None)?;
        let b = gen.synthesize(&s, Some(&ones))?;
        if a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            mismatched += 1;
        }
    }
    Ok(outcome(
        mismatched == 0,
        format!("{mismatched}/100 latents differ bitwise"),
    ))
}

fn dimension_law() -> Result<Outcome> {
    let cfg = GeneratorConfig::full_scale();
    let dim = domain_dimension(&cfg);
    let convs = LayerLayout::from_config(&cfg).num_layers();
    let synthesis = ParameterCounts::from_config(&cfg).synthesis;
    let ratio = synthesis / dim;
    let hdn = hdn_param_count(&HdnConfig::full_scale(), &LayerLayout::from_config(&cfg));
    Ok(outcome(
        dim == 6048 && convs == 17 && ratio >= 3900,
        format!("domain_dimension {dim}, {convs} feature convs, synthesis {synthesis} / {dim} = {ratio} (hypernetwork {hdn} params)"),
    ))
}

fn demodulation() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (o, i, k) = (1000, 16, 3);
    let w = ConvWeight::new(Array4::from_shape_simple_fn((o, i, k, k), || {
        StandardNormal.sample(&mut rng)
    }))?;
    let s: Vec<f64> = (0..i).map(|_| rng.random_range(0.1..2.0)).collect();
    let d: Vec<f64> = (0..i).map(|_| rng.random_range(0.1..2.0)).collect();
    let out = transform_weight(&w, &s, Some(&d), &ModConvConfig::default())?;
    let sums: Vec<f64> = out
        .values()
        .outer_iter()
        .map(|row| row.iter().map(|v| v * v).sum())
        .collect();
    let lo = sums.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(outcome(
        lo >= 1.0 - 1e-4 && hi <= 1.0,
        format!("row squared sums in [{lo:.12}, {hi:.12}] over {o} rows"),
    ))
}

/// Encoder with hand-picked embeddings: images are keyed by their first
/// pixel, texts by name.
#[derive(Debug)]
struct TableEncoder {
    images: Vec<(f64, Vec<f64>)>,
    texts: Vec<(&'static str, Vec<f64>)>,
}

impl Encoder for TableEncoder {
    fn name(&self) -> String {
        "table".into()
    }
    fn embed_dim(&self) -> usize {
        3
    }
    fn encode_image(&self, image: ArrayView3<f64>) -> Result<Embedding> {
        let key = image[[0, 0, 0]];
        let v = self
            .images
            .iter()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| Error::Input("unknown image".into()))?;
        Embedding::normalize(v.1.clone())
    }
    fn encode_text(&self, text: &str) -> Result<Embedding> {
        let v = self
            .texts
            .iter()
            .find(|(k, _)| *k == text)
            .ok_or_else(|| Error::Input("unknown text".into()))?;
        Embedding::normalize(v.1.clone())
    }
    fn image_vjp(&self, image: ArrayView3<f64>, _grad: &[f64]) -> Result<Array3<f64>> {
        Ok(Array3::zeros(image.dim()))
    }
}

fn loss_geometry() -> Result<Outcome> {
    let enc = TableEncoder {
        images: vec![(0.1, vec![1.0, 0.0, 0.0]), (0.2, vec![0.0, 1.0, 0.0])],
        texts: vec![
            ("a", vec![1.0, 0.0, 0.0]),
            ("b", vec![0.0, 1.0, 0.0]),
            ("up", vec![0.0, 0.0, 1.0]),
            ("down", vec![0.0, 0.0, -1.0]),
        ],
    };
    let img = |v: f64| Image::from_elem((3, 4, 4), v);
    let (bi, bj) = (img(0.1), img(0.2));
    // Image direction bi - bj = (1, -1, 0).
    let parallel = [1.0, -1.0, 0.0];
    let antiparallel = [-1.0, 1.0, 0.0];
    let orthogonal = [0.0, 0.0, 1.0];
    let mut worst: f64 = 0.0;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());

    for (r, want) in [(parallel, 0.0), (orthogonal, 1.0), (antiparallel, 2.0)] {
        let delta = [1.0, -1.0, 0.0];
        check(direction_loss(&delta, &r)?, want);
        check(clip_across_loss(&enc, bi.view(), bj.view(), &r)?, want);
        // The epsilon guard shifts the cosine by about eps / |delta|^2, so
        // scales stay where that is far below the tolerance.
        for scale in [0.5, 7.5, 1e4] {
            let scaled: Vec<f64> = delta.iter().map(|v| v * scale).collect();
            let r_scaled: Vec<f64> = r.iter().map(|v| v * 2.5 * scale).collect();
            check(direction_loss(&scaled, &r_scaled)?, want);
        }
    }
    check(tt_direction_loss(&enc, bi.view(), bj.view(), "a", "b")?, 0.0);
    check(tt_direction_loss(&enc, bi.view(), bj.view(), "up", "down")?, 1.0);
    check(tt_direction_loss(&enc, bi.view(), bj.view(), "b", "a")?, 2.0);
    let geometry = worst;

    // Degenerate zero directions.
    let zero = [0.0; 3];
    let degenerate = [
        direction_loss(&zero, &parallel)?,
        direction_loss(&zero, &zero)?,
        clip_across_loss(&enc, bi.view(), bi.view(), &parallel)?,
        tt_direction_loss(&enc, bi.view(), bi.view(), "a", "a")?,
    ];
    let degenerate_ok = degenerate.iter().all(|l| (l - 1.0).abs() < 1e-6);
    Ok(outcome(
        geometry < 1e-6 && degenerate_ok,
        format!("max deviation from 0/1/2 {geometry:.2e}; zero-direction losses {degenerate:?}"),
    ))
}

fn indomain_hand_case() -> Result<Outcome> {
    let at = |c: f64| vec![c, (1.0 - c * c).sqrt()];
    let e = vec![1.0, 0.0];
    let src = [e.as_slice(), &at(0.5)];
    let same = indomain_angle(&src, &src)?.0;
    let adapted_b = at(0.3);
    let adapted = [e.as_slice(), &adapted_b];
    let hand = indomain_angle(&adapted, &src)?.0;
    Ok(outcome(
        same == 0.0 && (hand - 0.08).abs() <= 1e-9,
        format!("identical batches {same}, 0.5 -> 0.3 case {hand:.12}"),
    ))
}

fn perturbed_domain(gen: &Generator, seed: u64) -> DomainVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..gen.layout().total_dim())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            1.0 + 0.1 * z
        })
        .collect();
    DomainVector::from_values(gen.layout(), v).unwrap()
}

/// Worst relative error of `grad` against central differences of `f` on
/// ten random coordinates.
fn fd_check(n: usize, grad: &[f64], seed: u64, mut f: impl FnMut(usize, f64) -> Result<f64>) -> Result<f64> {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let i = rng.random_range(0..n);
        let fd = (f(i, h)? - f(i, -h)?) / (2.0 * h);
        worst = worst.max(rel_err(grad[i], fd));
    }
    Ok(worst)
}

fn gradient_suite() -> Result<Outcome> {
    let gen = toy();
    let ens = mock_ensemble();
    let d0 = perturbed_domain(&gen, 11);
    let n = d0.len();
    let shifted = |i: usize, h: f64| {
        let mut d = d0.clone();
        d.values_mut()[i] += h;
        d
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut report = Vec::new();

    // Text direction and indomain terms, separately.
    let text_refs = ens
        .members()
        .iter()
        .map(|e| text_direction(e.as_ref(), "Anime Painting", "Photo"))
        .collect::<Result<Vec<_>>>()?;
    for (name, w_dir, w_ind) in [("direction", 1.0, 0.0), ("indomain", 0.0, 1.0)] {
        let obj = DirectionObjective::new(&gen, &ens, text_refs.clone(), w_dir, w_ind)?;
        let batch = obj.sample_batch(3, 0.9, &mut rng)?;
        let (_, g) = obj.gradient(&gen, Some(&d0), &batch, false)?;
        let err = fd_check(n, &g.domain, 21, |i, h| {
            Ok(obj.evaluate(&gen, Some(&shifted(i, h)), &batch)?.total)
        })?;
        report.push((name, err));
    }

    // Clip-across term with a projection direction from two renders.
    let styles = seeded_styles(&gen, 2, 99);
    let style_img = gen.synthesize(&styles[0], Some(&perturbed_domain(&gen, 12)))?;
    let proj_img = gen.synthesize(&styles[1], None)?;
    let proj_refs = ens
        .members()
        .iter()
        .map(|e| image_direction(e.as_ref(), style_img.view(), proj_img.view()))
        .collect::<Result<Vec<_>>>()?;
    let obj = DirectionObjective::new(&gen, &ens, proj_refs, 1.0, 0.0)?;
    let batch = obj.sample_batch(3, 0.9, &mut rng)?;
    let (_, g) = obj.gradient(&gen, Some(&d0), &batch, false)?;
    let err = fd_check(n, &g.domain, 22, |i, h| {
        Ok(obj.evaluate(&gen, Some(&shifted(i, h)), &batch)?.total)
    })?;
    report.push(("clip_across", err));

    let (_, g) = domain_norm_loss_grad(d0.values());
    let err = fd_check(n, &g, 23, |i, h| Ok(domain_norm_loss_grad(shifted(i, h).values()).0))?;
    report.push(("domain_norm", err));

    // Raw direction loss on random vectors.
    let a: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
    let r: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
    let (_, g) = direction_loss_grad(&a, &r)?;
    let err = fd_check(64, &g, 24, |i, h| {
        let mut x = a.clone();
        x[i] += h;
        direction_loss(&x, &r)
    })?;
    report.push(("cosine", err));

    // Hypernetwork combined loss with respect to its parameters.
    let domains = three_domains();
    let mut cfg = TrainingConfig::defaults(TrainingMode::HdnFixed);
    cfg.batch_size = 3;
    let obj = HdnObjective::new(&gen, &ens, &domains, &cfg)?;
    let mut params = HdnParams::new(&HdnConfig::toy(), gen.layout())?;
    let mut flat = params.flatten();
    for v in flat.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += 0.01 * z;
    }
    params.set_flat(&flat)?;
    let batch = obj.sample_batch(0, &mut rng)?;
    let mut grad = params.zeros_like();
    obj.gradient(&params, &batch, &mut grad)?;
    let g = grad.flatten();
    let mut probe = params.clone();
    let err = fd_check(flat.len(), &g, 25, |i, h| {
        let mut f = flat.clone();
        f[i] += h;
        probe.set_flat(&f)?;
        Ok(obj.evaluate(&probe, &batch)?.total)
    })?;
    report.push(("hdn_combined", err));

    let worst = report.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = report
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(outcome(worst < 1e-2, format!("max rel err {worst:.2e} [{detail}]")))
}

fn sampling() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = 5;
    let mut worst_simplex: f64 = 0.0;
    let mut worst_mean: f64 = 0.0;
    for beta in [1.0, 0.5] {
        let mut mean = vec![0.0; m];
        for _ in 0..10_000 {
            let a = sample_dirichlet(m, beta, &mut rng)?;
            let neg = a.iter().cloned().fold(0.0, f64::min).abs();
            worst_simplex = worst_simplex.max((a.iter().sum::<f64>() - 1.0).abs()).max(neg);
            mean.iter_mut().zip(&a).for_each(|(s, v)| *s += v / 10_000.0);
        }
        worst_mean = mean
            .iter()
            .fold(worst_mean, |acc, v| acc.max((v - 1.0 / m as f64).abs()));
    }
    let points: Vec<Embedding> = (0..m).map(|_| random_unit(64, &mut rng)).collect();
    for _ in 0..1000 {
        let s = sample_convex_hull(&points, &HullSampleConfig::for_batch(96), &mut rng)?;
        let neg = s.weights.iter().cloned().fold(0.0, f64::min).abs();
        worst_simplex = worst_simplex.max((s.weights.iter().sum::<f64>() - 1.0).abs()).max(neg);
    }

    let gamma = 0.35;
    let (mut worst_cos, mut worst_norm): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let t = random_unit(64, &mut rng);
        let r = resample_on_sphere(&t, gamma, &mut rng)?;
        let cos: f64 = t.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum();
        let norm = r.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_cos = worst_cos.max((cos - gamma.cos()).abs());
        worst_norm = worst_norm.max((norm - 1.0).abs());
    }
    Ok(outcome(
        worst_simplex <= 1e-9 && worst_mean <= 0.02 && worst_cos <= 1e-5 && worst_norm <= 1e-6,
        format!(
            "simplex dev {worst_simplex:.1e}, Dirichlet mean dev {worst_mean:.4}, cos dev {worst_cos:.1e}, norm dev {worst_norm:.1e}"
        ),
    ))
}

fn hdn_init_identity() -> Result<Outcome> {
    let gen = toy();
    let params = HdnParams::new(&HdnConfig::toy(), gen.layout())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut off = 0;
    for _ in 0..100 {
        let d = params.forward(random_unit(64, &mut rng).as_slice())?;
        if d.values().iter().any(|&v| v != 1.0) {
            off += 1;
        }
    }
    // The untrained prediction renders exactly like the source.
    let s = &seeded_styles(&gen, 1, 0)[0];
    let d = params.forward(random_unit(64, &mut rng).as_slice())?;
    let same = gen.synthesize(s, Some(&d))? == gen.synthesize(s, None)?;
    Ok(outcome(
        off == 0 && same,
        format!("{off}/100 embeddings give a non-ones vector; render equals source: {same}"),
    ))
}

const FIXTURE_DOMAINS: [(&str, &str); 3] = [("Anime Painting", "Photo"), ("Zombie", "Human"), ("Sketch", "Photo")];

fn three_domains() -> HdnDomains {
    HdnDomains::Fixed(
        FIXTURE_DOMAINS
            .iter()
            .map(|(t, s)| DomainDescriptor::text(t, s))
            .collect(),
    )
}

fn hdn_fixture(tt: f64) -> Result<HdnTraining> {
    let gen = toy();
    let ens = mock_ensemble();
    let mut cfg = TrainingConfig::defaults(TrainingMode::HdnFixed);
    cfg.iterations = 400;
    cfg.batch_size = 3;
    cfg.seed = 0;
    cfg.weights.tt_direction = tt;
    train_hdn(&gen, &ens, &three_domains(), &HdnConfig::toy(), &cfg)
}

/// Predicted domain vectors for the fixture domains and their pairwise L2
/// distances.
fn predicted_distances(params: &HdnParams) -> Result<Vec<f64>> {
    let ens = mock_ensemble();
    let enc = &ens.members()[0];
    let ds = FIXTURE_DOMAINS
        .iter()
        .map(|(t, _)| params.forward(enc.encode_text(t)?.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for i in 0..ds.len() {
        for j in i + 1..ds.len() {
            let d2: f64 = ds[i]
                .values()
                .iter()
                .zip(ds[j].values())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out.push(d2.sqrt());
        }
    }
    Ok(out)
}

/// Final combined loss (mean of the last 50 iterations) against the first
/// iteration and the mean of iterations 0..50.
fn smoke(h: &LossHistory) -> (bool, String) {
    let t = h.totals();
    let first = t[0];
    let early = h.moving_average(0, 50).unwrap();
    let last = *t.last().unwrap();
    let fin = h.trailing_average(50).unwrap();
    (
        fin < first && fin < early,
        format!("loss[0] {first:.4}, mean[0..50] {early:.4}, final mean[-50..] {fin:.4}, last {last:.4}"),
    )
}

fn smoke_fixtures(hdn: &HdnTraining) -> Result<Outcome> {
    let start = Instant::now();
    let gen = toy();
    let ens = mock_ensemble();
    let mut cfg = TrainingConfig::defaults(TrainingMode::Text);
    cfg.iterations = 300;
    cfg.batch_size = 4;
    cfg.seed = 0;
    let text = adapt_single_domain_text(&gen, &ens, &DomainDescriptor::text("Anime Painting", "Photo"), &cfg)?;
    let text_secs = start.elapsed().as_secs_f64();
    let (text_ok, text_msg) = smoke(&text.history);
    let (hdn_ok, hdn_msg) = smoke(&hdn.history);
    let dists = predicted_distances(&hdn.params)?;
    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(outcome(
        text_ok && hdn_ok && min > 1e-3 && text_secs < 300.0,
        format!("text ({text_secs:.0} s): {text_msg}; hdn: {hdn_msg}; min pairwise d distance {min:.4e}"),
    ))
}

fn ablation(with_tt: &HdnTraining) -> Result<Outcome> {
    let without = hdn_fixture(0.0)?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let a = mean(predicted_distances(&with_tt.params)?);
    let b = mean(predicted_distances(&without.params)?);
    Ok(outcome(
        a > b,
        format!("mean pairwise d distance with tt {a:.6e}, without {b:.6e}"),
    ))
}

fn metrics() -> Result<Outcome> {
    let e = |v: Vec<f64>| Embedding::normalize(v).unwrap();
    let text = e(vec![1.0, 0.0, 0.0]);
    let set = [e(vec![1.0, 0.0, 0.0]), e(vec![0.0, 1.0, 0.0]), e(vec![0.6, 0.8, 0.0])];
    // Dots with the text: 1, 0, 0.6. Pairwise cosines: 0, 0.6, 0.8.
    let quality = quality_from_embeddings(&text, &set)?;
    let diversity = diversity_from_embeddings(&set)?;
    let (want_q, want_d) = (1.6 / 3.0, (1.0 + 0.4 + 0.2) / 3.0);
    let same = diversity_from_embeddings(&[set[2].clone(), set[2].clone(), set[2].clone()])?;
    Ok(outcome(
        (quality - want_q).abs() <= 1e-6 && (diversity - want_d).abs() <= 1e-6 && same == 0.0,
        format!("quality {quality:.9} (hand {want_q:.9}), diversity {diversity:.9} (hand {want_d:.9}), identical set {same}"),
    ))
}

fn decode_kind(bytes: &[u8]) -> &'static str {
    match Checkpoint::from_bytes(bytes) {
        Ok(_) => "ok",
        Err(Error::Checkpoint(CheckpointError::Version(_))) => "version",
        Err(Error::Checkpoint(CheckpointError::Truncated(_))) => "truncated",
        Err(Error::Checkpoint(CheckpointError::Corrupt(_))) => "corrupt",
        Err(Error::Checkpoint(CheckpointError::Layout(_))) => "layout",
        Err(_) => "other",
    }
}

fn generate_bytes(ckpt: &Path, out: &Path) -> Result<Vec<u8>> {
    let status = Command::new(env!("CARGO_BIN_EXE_hyperdomain"))
        .args(["generate", "--num", "6", "--seed", "42", "--checkpoint"])
        .arg(ckpt)
        .arg("--out")
        .arg(out)
        .env_remove("HYPERDOMAIN_OUT_DIR")
        .output()?;
    if !status.status.success() {
        return Err(Error::Input(String::from_utf8_lossy(&status.stderr).into_owned()));
    }
    Ok(std::fs::read(out.join("samples.png"))?)
}

fn persistence() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let config = RunConfig::default();
    let gen = toy();
    let d = perturbed_domain(&gen, 31);
    let ckpt = Checkpoint::from_domain_vector(CheckpointMode::TextDomain, &config, &d, 5, 9)?;
    let path = dir.path().join("domain.ckpt");
    ckpt.save(&path)?;
    let bytes = std::fs::read(&path)?;
    let loaded = Checkpoint::load(&path)?;
    let domain_bits = loaded
        .domain_vector()?
        .values()
        .iter()
        .zip(d.values())
        .all(|(a, b)| *a == *b as f32 as f64);
    let mut round_trip = loaded.to_bytes() == bytes && loaded == ckpt && domain_bits;

    let params = HdnParams::new(&HdnConfig::toy(), gen.layout())?;
    let hdn = Checkpoint::from_hdn(&config, &params, 0, 0)?;
    let hdn_bytes = hdn.to_bytes();
    let hdn_back = Checkpoint::from_bytes(&hdn_bytes)?;
    let e = random_unit(64, &mut ChaCha8Rng::seed_from_u64(1));
    round_trip &= hdn_back.to_bytes() == hdn_bytes
        && hdn_back.hdn_params()?.forward(e.as_slice())? == params.forward(e.as_slice())?;

    let corrupt = |offset: usize| {
        let mut b = bytes.clone();
        b[offset] ^= 0xff;
        decode_kind(&b)
    };
    let cases = [
        ("magic", corrupt(0), "version"),
        ("version", corrupt(4), "version"),
        ("mode", corrupt(8), "corrupt"),
        ("digest", corrupt(12), "corrupt"),
        ("truncated", decode_kind(&bytes[..bytes.len() - 3]), "truncated"),
        ("short header", decode_kind(&bytes[..10]), "truncated"),
    ];
    let header_ok = cases.iter().all(|(_, got, want)| got == want);

    let a = generate_bytes(&path, &dir.path().join("g1"))?;
    let b = generate_bytes(&path, &dir.path().join("g2"))?;
    let deterministic = a == b && !a.is_empty();
    let summary = cases
        .iter()
        .map(|(n, got, _)| format!("{n}->{got}"))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(outcome(
        round_trip && header_ok && deterministic,
        format!(
            "round trip bitwise {round_trip}; {summary}; generate byte-identical {deterministic} ({} bytes)",
            a.len()
        ),
    ))
}

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let mut failed = Vec::new();
    let mut record = |id: usize, pass: bool| {
        if !pass {
            failed.push(id);
        }
    };
    record(
        1,
        run_criterion(1, "identity adaptation", Some(secs(5)), identity_adaptation),
    );
    record(2, run_criterion(2, "dimension law", Some(secs(1)), dimension_law));
    record(3, run_criterion(3, "demodulation", Some(secs(5)), demodulation));
    record(4, run_criterion(4, "loss geometry", Some(secs(5)), loss_geometry));
    record(5, run_criterion(5, "indomain angle", Some(secs(1)), indomain_hand_case));
    record(6, run_criterion(6, "gradient suite", Some(secs(120)), gradient_suite));
    record(7, run_criterion(7, "sphere/hull sampling", Some(secs(10)), sampling));
    record(8, run_criterion(8, "hdn init identity", None, hdn_init_identity));

    let start = Instant::now();
    let hdn = hdn_fixture(0.4);
    let hdn_secs = start.elapsed().as_secs_f64();
    print_line(&format!(
        "       shared hdn fixture (tt 0.4, 400 iterations) trained in {hdn_secs:.1} s"
    ));
    match hdn {
        Ok(hdn) => {
            record(
                9,
                run_criterion(9, "training smoke fixtures", Some(secs(300)), || {
                    let mut o = smoke_fixtures(&hdn)?;
                    o.pass &= hdn_secs < 300.0;
                    Ok(o)
                }),
            );
            record(10, run_criterion(10, "tt ablation", Some(secs(600)), || ablation(&hdn)));
        }
        Err(e) => {
            print_line(&format!(
                "[FAIL] criterion  9 training smoke fixtures: hdn fixture failed: {e}"
            ));
            print_line(&format!("[FAIL] criterion 10 tt ablation: hdn fixture failed: {e}"));
            record(9, false);
            record(10, false);
        }
    }
    record(11, run_criterion(11, "metrics", None, metrics));
    record(12, run_criterion(12, "persistence", None, persistence));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
