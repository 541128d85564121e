mod domains;
mod grid;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hyperdomain::config::RunConfig;
use hyperdomain::embedding::{diversity_metric, quality_metric, EncoderRegistry};
use hyperdomain::generator::{domain_dimension, Image, WPlus};
use hyperdomain::hdn::hdn_param_count;
use hyperdomain::sampler::{generate_combinations, OpenDomainSampler};
use hyperdomain::trainer::{self, HdnDomains, TrainingMode};
use hyperdomain::{Checkpoint, CheckpointMode, DomainDescriptor, DomainVector, Error, Generator, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(
    name = "hyperdomain",
    version,
    about = "Text- and image-driven domain adaptation of a style-based generator"
)]
struct Cli {
    /// TOML run configuration; defaults apply to every omitted field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Output directory [default: output.dir from the config, else ./out]
    #[arg(long, env = "HYPERDOMAIN_OUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Adapt to a text-described domain by training a domain vector.
    AdaptText {
        #[arg(long)]
        text: String,
        #[arg(long)]
        source_text: Option<String>,
        /// Overrides training.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Adapt to the domain of a single style image.
    AdaptImage {
        #[arg(long)]
        style_image: PathBuf,
        /// Source-domain counterpart of the style image; found by latent
        /// inversion when omitted.
        #[arg(long)]
        projection_image: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train the hypernetwork on a domain list or on sampled domains.
    TrainHdn {
        /// `target | source` per line; the shipped 20-domain list by default.
        #[arg(long, conflicts_with = "open")]
        domains_file: Option<PathBuf>,
        /// Sample domains from prompt combinations every iteration.
        #[arg(long)]
        open: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Render a grid of samples from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target text, required for hypernetwork checkpoints.
        #[arg(long)]
        text: Option<String>,
        #[arg(long, default_value_t = 16)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Quality and diversity of checkpoint samples under the held-out encoder.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 1000)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Print a checkpoint's header, layout and parameter counts.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let out = |o: &OutArgs| out_dir(o, &config);
    match cli.command {
        Command::AdaptText {
            text,
            source_text,
            seed,
            out: o,
        } => {
            let dir = out(&o)?;
            adapt_text(config.clone(), &text, source_text, seed, &dir)
        }
        Command::AdaptImage {
            style_image,
            projection_image,
            seed,
            out: o,
        } => {
            let dir = out(&o)?;
            adapt_image(config.clone(), &style_image, projection_image.as_deref(), seed, &dir)
        }
        Command::TrainHdn {
            domains_file,
            open,
            seed,
            out: o,
        } => {
            let dir = out(&o)?;
            train_hdn(config.clone(), domains_file.as_deref(), open, seed, &dir)
        }
        Command::Generate {
            checkpoint,
            text,
            num,
            seed,
            out: o,
        } => generate(&checkpoint, text.as_deref(), num, seed, &out(&o)?),
        Command::Eval {
            checkpoint,
            text,
            num,
            seed,
            out: o,
        } => eval(&checkpoint, &text, num, seed, &out(&o)?),
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    }
}

fn out_dir(args: &OutArgs, config: &RunConfig) -> Result<PathBuf> {
    let dir = args
        .out
        .clone()
        .or_else(|| config.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn with_seed(mut config: RunConfig, seed: Option<u64>) -> RunConfig {
    if seed.is_some() {
        config.training.seed = seed;
    }
    config
}

/// Images from `num` seeded latents, without style mixing.
fn render(gen: &Generator, d: Option<&DomainVector>, num: usize, seed: u64) -> Result<Vec<Image>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num)
        .map(|_| {
            let w = gen.mapping_forward(&gen.sample_z(&mut rng))?;
            let styles = gen.styles(&WPlus::broadcast(&w, gen.num_ws()))?;
            gen.synthesize(&styles, d)
        })
        .collect()
}

fn before_after(
    config: &RunConfig,
    source: &Generator,
    adapted: &Generator,
    d: Option<&DomainVector>,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let cols = config.output.grid_cols;
    let mut images = render(source, None, cols, seed)?;
    images.extend(render(adapted, d, cols, seed)?);
    grid::save_grid(&images, cols, path)
}

fn adapt_text(config: RunConfig, text: &str, source_text: Option<String>, seed: Option<u64>, out: &Path) -> Result<()> {
    let config = with_seed(config, seed).resolved(TrainingMode::Text)?;
    let cfg = config.training(TrainingMode::Text)?;
    let gen = Generator::new(config.generator.clone())?;
    let ens = config.encoder.ensemble(&EncoderRegistry::default())?;
    let source_text = source_text.unwrap_or_else(|| cfg.source_text.clone());
    let result = trainer::adapt_single_domain_text(&gen, &ens, &DomainDescriptor::text(text, &source_text), &cfg)?;
    let step = cfg.iterations as u64;
    let (ckpt, adapted) = match &result.generator {
        Some(tuned) => (Checkpoint::from_synthesis(&config, tuned, step, cfg.seed)?, tuned),
        None => (
            Checkpoint::from_domain_vector(CheckpointMode::TextDomain, &config, &result.domain, step, cfg.seed)?,
            &gen,
        ),
    };
    ckpt.save(&out.join("domain.ckpt"))?;
    result.history.write_csv(&out.join("loss.csv"))?;
    let d = result.generator.is_none().then_some(&result.domain);
    before_after(&config, &gen, adapted, d, cfg.seed, &out.join("before_after.png"))?;
    println!("{}", summary(&result.history, out));
    Ok(())
}

fn adapt_image(
    config: RunConfig,
    style: &Path,
    projection: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let config = with_seed(config, seed).resolved(TrainingMode::OneShot)?;
    let cfg = config.training(TrainingMode::OneShot)?;
    let gen = Generator::new(config.generator.clone())?;
    let ens = config.encoder.ensemble(&EncoderRegistry::default())?;
    let style = grid::load_image(style, gen.resolution())?;
    let projection = projection.map(|p| grid::load_image(p, gen.resolution())).transpose()?;
    let result = trainer::adapt_one_shot(&gen, &ens, &style, projection.as_ref(), &cfg)?;
    let a = &result.adaptation;
    let step = cfg.iterations as u64;
    let (ckpt, adapted) = match &a.generator {
        Some(tuned) => (Checkpoint::from_synthesis(&config, tuned, step, cfg.seed)?, tuned),
        None => (
            Checkpoint::from_domain_vector(CheckpointMode::OneShotDomain, &config, &a.domain, step, cfg.seed)?,
            &gen,
        ),
    };
    ckpt.save(&out.join("domain.ckpt"))?;
    a.history.write_csv(&out.join("loss.csv"))?;
    grid::save_grid(
        &[style, result.projection.clone()],
        2,
        &out.join("style_projection.png"),
    )?;
    let d = a.generator.is_none().then_some(&a.domain);
    before_after(&config, &gen, adapted, d, cfg.seed, &out.join("before_after.png"))?;
    println!("{}", summary(&a.history, out));
    Ok(())
}

fn train_hdn(config: RunConfig, domains_file: Option<&Path>, open: bool, seed: Option<u64>, out: &Path) -> Result<()> {
    let mode = if open {
        TrainingMode::HdnOpen
    } else {
        TrainingMode::HdnFixed
    };
    let config = with_seed(config, seed).resolved(mode)?;
    let cfg = config.training(mode)?;
    let gen = Generator::new(config.generator.clone())?;
    let ens = config.encoder.ensemble(&EncoderRegistry::default())?;
    let (domains, preview) = if open {
        let prompts = generate_combinations(&config.sampler.vocabulary()?)?;
        if prompts.is_empty() {
            return Err(Error::Config("the vocabulary expands to no prompts".into()));
        }
        let bases = ens
            .members()
            .iter()
            .map(|enc| prompts.iter().map(|p| enc.encode_text(p)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let sampler = OpenDomainSampler::new(bases, config.sampler.gamma, config.sampler.hull(cfg.batch_size))?;
        let preview = prompts.into_iter().take(4).collect::<Vec<_>>();
        (
            HdnDomains::Open {
                sampler,
                source_text: cfg.source_text.clone(),
            },
            preview,
        )
    } else {
        let text = match domains_file {
            Some(p) => std::fs::read_to_string(p)?,
            None => domains::DEFAULT_DOMAINS.to_string(),
        };
        let list = domains::parse_domains(&text, &cfg.source_text)?;
        let preview = list
            .iter()
            .filter_map(|d| match &d.payload {
                hyperdomain::embedding::DomainPayload::Text(t) => Some(t.clone()),
                _ => None,
            })
            .collect();
        (HdnDomains::Fixed(list), preview)
    };
    let result = trainer::train_hdn(&gen, &ens, &domains, &config.hdn, &cfg)?;
    Checkpoint::from_hdn(&config, &result.params, cfg.iterations as u64, cfg.seed)?.save(&out.join("hdn.ckpt"))?;
    result.history.write_csv(&out.join("loss.csv"))?;

    let cols = config.output.grid_cols;
    let mut images = render(&gen, None, cols, cfg.seed)?;
    let encoder = &ens.members()[0];
    for t in &preview {
        let d = result.params.forward(encoder.encode_text(t)?.as_slice())?;
        images.extend(render(&gen, Some(&d), cols, cfg.seed)?);
    }
    grid::save_grid(&images, cols, &out.join("domains.png"))?;
    println!("{}", summary(&result.history, out));
    Ok(())
}

fn summary(history: &trainer::LossHistory, out: &Path) -> String {
    let t = history.totals();
    match (t.first(), t.last()) {
        (Some(a), Some(b)) => format!("{} iterations, loss {a:.4} -> {b:.4}; wrote {}", t.len(), out.display()),
        _ => format!("0 iterations; wrote {}", out.display()),
    }
}

/// Generator and optional domain vector described by a checkpoint.
fn load_model(ckpt: &Checkpoint, text: Option<&str>) -> Result<(Generator, Option<DomainVector>)> {
    let config = ckpt.config()?;
    match ckpt.mode {
        CheckpointMode::TextDomain | CheckpointMode::OneShotDomain => {
            Ok((Generator::new(config.generator)?, Some(ckpt.domain_vector()?)))
        }
        CheckpointMode::FullSynthesis => Ok((ckpt.synthesis_generator()?, None)),
        CheckpointMode::Hdn => {
            let text = text.ok_or_else(|| Error::Config("--text is required for hypernetwork checkpoints".into()))?;
            let ens = config.encoder.ensemble(&EncoderRegistry::default())?;
            let e = ens.members()[0].encode_text(text)?;
            let d = ckpt.hdn_params()?.forward(e.as_slice())?;
            Ok((Generator::new(config.generator)?, Some(d)))
        }
    }
}

fn generate(path: &Path, text: Option<&str>, num: usize, seed: u64, out: &Path) -> Result<()> {
    if num == 0 {
        return Err(Error::Config("--num must be at least 1".into()));
    }
    let ckpt = Checkpoint::load(path)?;
    let cols = ckpt.config()?.output.grid_cols;
    let (gen, d) = load_model(&ckpt, text)?;
    let images = render(&gen, d.as_ref(), num, seed)?;
    let file = out.join("samples.png");
    grid::save_grid(&images, cols, &file)?;
    println!("wrote {}", file.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: String,
    mode: String,
    text: &'a str,
    num: usize,
    seed: u64,
    eval_encoder: String,
    quality: f64,
    diversity: f64,
}

fn eval(path: &Path, text: &str, num: usize, seed: u64, out: &Path) -> Result<()> {
    if num < 2 {
        return Err(Error::Config("--num must be at least 2".into()));
    }
    let ckpt = Checkpoint::load(path)?;
    let config = ckpt.config()?;
    let (gen, d) = load_model(&ckpt, Some(text))?;
    let images = render(&gen, d.as_ref(), num, seed)?;
    let enc = config.encoder.eval_encoder(&EncoderRegistry::default())?;
    let report = EvalReport {
        checkpoint: path.display().to_string(),
        mode: format!("{:?}", ckpt.mode),
        text,
        num,
        seed,
        eval_encoder: enc.name(),
        quality: quality_metric(enc.as_ref(), &images, text)?,
        diversity: diversity_metric(enc.as_ref(), &images)?,
    };
    let human = format!(
        "checkpoint: {}\nmode: {}\ntext: {}\nsamples: {}\nquality: {:.6}\ndiversity: {:.6}\n",
        report.checkpoint, report.mode, text, num, report.quality, report.diversity
    );
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    std::fs::write(out.join("eval.json"), json + "\n")?;
    std::fs::write(out.join("eval.txt"), &human)?;
    print!("{human}");
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    let config = ckpt.config()?;
    let gen = Generator::new(config.generator.clone())?;
    let digest: String = ckpt.digest().iter().map(|b| format!("{b:02x}")).collect();
    println!("format: HDNC v{}", hyperdomain::trainer::checkpoint::VERSION);
    println!("mode: {:?}", ckpt.mode);
    println!("step: {}", ckpt.step);
    println!("seed: {}", ckpt.seed);
    println!("config sha256: {digest}");
    println!("sections: {}", ckpt.sections.len());
    println!("domain_dimension: {}", domain_dimension(&config.generator));
    println!("layers:");
    for s in gen.layout().layers() {
        println!(
            "  conv{:<2} {:>4}x{:<4} in {:>4} out {:>4} offset {}",
            s.index, s.resolution, s.resolution, s.in_channels, s.out_channels, s.offset
        );
    }
    let p = gen.count_parameters();
    println!("generator parameters:");
    println!("  mapping {}", p.mapping);
    println!("  affine {}", p.affine);
    println!("  synthesis {}", p.synthesis);
    println!("  to_rgb {}", p.to_rgb);
    if ckpt.mode == CheckpointMode::Hdn {
        println!(
            "hypernetwork parameters: {}",
            hdn_param_count(&config.hdn, gen.layout())
        );
    }
    Ok(())
}
