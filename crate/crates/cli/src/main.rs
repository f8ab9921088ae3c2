use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cyclecap::caption::caption_from_text;
use cyclecap::driver::{self, RunOptions};
use cyclecap::render::reconstruct;
use cyclecap::similarity::cycle_reward;
use cyclecap::world::{load_dataset, sample_dataset, save_dataset};
use cyclecap::{
    Backend, Checkpoint, KeyValues, MetricKind, RasterImage, RunConfig, Similarity, Vocab,
};

#[derive(Parser)]
#[command(
    name = "cyclecap",
    version,
    about = "Cycle-consistency GRPO captioning on a toy scene world"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a scene dataset.
    GenScenes(GenScenes),
    /// Fine-tune the caption policy with GRPO on the cycle reward.
    Train(Train),
    /// Greedy-caption a dataset with a checkpoint and score it.
    Eval(Eval),
    /// Render a caption to a PPM image.
    RenderCaption(RenderCaption),
    /// Cycle reward of a caption against an image.
    Reward(Reward),
    /// Collect metrics logs into one tidy CSV (n, step, mean_reward).
    Plot(Plot),
}

/// Layers shared by every subcommand: defaults, then `CYCLECAP_OUT`, then the
/// config file, then `--set`, then dedicated flags.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
        let mut layers = Vec::new();
        if let Some(out) = std::env::var_os("CYCLECAP_OUT") {
            let mut env = KeyValues::new();
            env.set("paths.out_dir", Path::new(&out).display());
            layers.push(env);
        }
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            layers.push(KeyValues::parse(&text)?);
        }
        let mut sets = KeyValues::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            sets.set(k.trim(), v.trim());
        }
        layers.push(sets);
        let mut named = KeyValues::new();
        for (k, v) in flags {
            if let Some(v) = v {
                named.set(*k, v);
            }
        }
        layers.push(named);
        Ok(RunConfig::resolve(&layers)?)
    }
}

fn metric_name(s: &str) -> Result<String, String> {
    MetricKind::from_name(s)
        .map(|m| m.name().to_string())
        .ok_or_else(|| format!("unknown metric {s:?} (pixel, patch, global, blend)"))
}

fn backend_name(s: &str) -> Result<String, String> {
    Backend::from_name(s)
        .map(|b| b.name().to_string())
        .ok_or_else(|| format!("unknown backend {s:?} (exact, jitter)"))
}

fn preset_name(s: &str) -> Result<String, String> {
    cyclecap::Preset::from_name(s)
        .map(|p| p.name().to_string())
        .ok_or_else(|| format!("unknown preset {s:?} (toy, paper)"))
}

#[derive(Args)]
struct GenScenes {
    /// Number of scenes.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; defaults to `paths.dataset`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Named hyperparameter preset.
    #[arg(long, value_parser = preset_name)]
    preset: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    n_generations: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long, value_parser = metric_name)]
    metric: Option<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory (also `CYCLECAP_OUT`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train once per group size, each into `<out>/n<N>`.
    #[arg(long, value_delimiter = ',', value_name = "N,N,...")]
    ablate_n: Vec<usize>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed steps without changing the schedule.
    #[arg(long)]
    stop_after: Option<u64>,
    #[arg(long, default_value_t = 100)]
    checkpoint_every: u64,
    /// Print a progress line every this many steps; 0 is silent.
    #[arg(long, default_value_t = 50)]
    log_every: u64,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Per-image CSV; defaults to `<out dir>/eval.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderCaption {
    /// Caption text; BOS/EOS are added when missing.
    caption: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = backend_name)]
    backend: Option<String>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct Reward {
    /// Target image (binary PPM).
    image: PathBuf,
    caption: String,
    #[arg(long, value_parser = metric_name)]
    metric: Option<String>,
    #[arg(long, value_parser = backend_name)]
    backend: Option<String>,
    /// Generator seed for the reconstruction.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct Plot {
    /// Metrics logs, each `N=PATH` or a path whose directory holds `config.resolved`.
    #[arg(required = true)]
    inputs: Vec<String>,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScenes(a) => gen_scenes(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::RenderCaption(a) => render_caption(a),
        Command::Reward(a) => reward(a),
        Command::Plot(a) => plot(a),
    }
}

fn gen_scenes(a: GenScenes) -> Result<()> {
    let cfg = a.cfg.resolve(&[])?;
    let out = a.out.unwrap_or(cfg.dataset);
    let scenes = sample_dataset(a.seed, a.count as usize, &cfg.world)?;
    save_dataset(&out, &scenes)?;
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    let mut hist = vec![0usize; cfg.world.max_objects + 1];
    for s in &scenes {
        hist[s.objects.len()] += 1;
    }
    for (k, n) in hist.iter().enumerate().skip(cfg.world.min_objects) {
        println!("objects {k}: {n}");
    }
    let relations: usize = scenes.iter().map(|s| s.relations.len()).sum();
    println!("relations: {relations}");
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let cfg = a.cfg.resolve(&[
        ("run.preset", a.preset.clone()),
        ("train.learning_rate", a.lr.map(|v| v.to_string())),
        (
            "train.n_generations",
            a.n_generations.map(|v| v.to_string()),
        ),
        ("train.max_steps", a.max_steps.map(|v| v.to_string())),
        ("reward.metric", a.metric.clone()),
        ("train.master_seed", a.seed.map(|v| v.to_string())),
        ("paths.dataset", path(&a.dataset)),
        ("paths.out_dir", path(&a.out)),
    ])?;
    if !cfg.dataset.exists() {
        bail!(
            "dataset {} not found (create one with `cyclecap gen-scenes`)",
            cfg.dataset.display()
        );
    }
    let scenes = load_dataset(&cfg.dataset, cfg.world.grid)?;
    let opts = RunOptions {
        threads: a.threads,
        resume: a.resume.clone(),
        stop_after: a.stop_after,
        checkpoint_every: a.checkpoint_every,
    };
    let runs: Vec<RunConfig> = if a.ablate_n.is_empty() {
        vec![cfg]
    } else {
        if a.resume.is_some() {
            bail!("--resume cannot be combined with --ablate-n");
        }
        a.ablate_n
            .iter()
            .map(|&n| {
                let mut c = cfg.clone();
                c.set("train.n_generations", &n.to_string())?;
                c.out_dir = cfg.out_dir.join(format!("n{n}"));
                c.validate()?;
                Ok(c)
            })
            .collect::<Result<_>>()?
    };
    for c in &runs {
        let log_every = a.log_every;
        let outcome = driver::train(c, &scenes, &opts, |m| {
            if log_every > 0 && m.step % log_every == 0 {
                println!(
                    "n={} step {:>5}  lr {:.2e}  reward {:.4} (max {:.4})  kl {:.4}  clip {:.3}  len {:.1}",
                    c.train.n_generations,
                    m.step,
                    m.lr,
                    m.mean_reward,
                    m.max_reward,
                    m.kl,
                    m.clip_fraction,
                    m.mean_len
                );
            }
        })?;
        println!(
            "n={}: {}/{} steps, checkpoint {}, metrics {}",
            c.train.n_generations,
            outcome.steps_done,
            outcome.total_steps,
            outcome.last_checkpoint.display(),
            c.out_dir.join(driver::METRICS_NAME).display()
        );
    }
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = RunConfig::resolve(std::slice::from_ref(&ck.config))?;
    let dataset = a.dataset.unwrap_or_else(|| cfg.dataset.clone());
    let scenes = load_dataset(&dataset, cfg.world.grid)?;
    let report = driver::evaluate_checkpoint(&ck, &scenes)?;
    let out = match a.out {
        Some(p) => p,
        None => std::env::var_os("CYCLECAP_OUT")
            .map(PathBuf::from)
            .unwrap_or(cfg.out_dir)
            .join("eval.csv"),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let vocab = Vocab::new(cfg.renderer.grid);
    fs::write(&out, report.to_csv(&vocab)).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", report.summary());
    println!("per-image scores in {}", out.display());
    Ok(())
}

fn render_caption(a: RenderCaption) -> Result<()> {
    let cfg = a.cfg.resolve(&[("render.backend", a.backend.clone())])?;
    let vocab = Vocab::new(cfg.renderer.grid);
    let caption = caption_from_text(&a.caption, &vocab)?;
    let img = reconstruct(&caption, &vocab, &cfg.renderer, a.seed);
    fs::write(&a.out, img.to_ppm()).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {}x{} image to {}",
        img.width(),
        img.height(),
        a.out.display()
    );
    Ok(())
}

fn reward(a: Reward) -> Result<()> {
    let cfg = a.cfg.resolve(&[
        ("reward.metric", a.metric.clone()),
        ("render.backend", a.backend.clone()),
    ])?;
    let bytes = fs::read(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let image = RasterImage::from_ppm(&bytes)?;
    let vocab = Vocab::new(cfg.renderer.grid);
    let caption = caption_from_text(&a.caption, &vocab)?;
    let sim = Similarity::new(cfg.metric.clone())?;
    let r = cycle_reward(&image, &caption, &vocab, &cfg.renderer, &sim, a.seed)?;
    println!("{r:.12}");
    Ok(())
}

fn plot(a: Plot) -> Result<()> {
    let mut out = String::from("n,step,mean_reward\n");
    for input in &a.inputs {
        let (n, path) = match input.split_once('=') {
            Some((n, p)) => (
                n.parse::<usize>()
                    .with_context(|| format!("bad group size in {input:?}"))?,
                PathBuf::from(p),
            ),
            None => {
                let path = PathBuf::from(input);
                let resolved = path
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(driver::RESOLVED_NAME);
                let text = fs::read_to_string(&resolved).with_context(|| {
                    format!(
                        "{input}: no N= prefix and no {} to read n from",
                        resolved.display()
                    )
                })?;
                (
                    RunConfig::resolve(&[KeyValues::parse(&text)?])?
                        .train
                        .n_generations,
                    path,
                )
            }
        };
        for m in driver::read_metrics(&path)? {
            writeln!(out, "{n},{},{}", m.step, m.mean_reward)?;
        }
    }
    match a.out {
        Some(p) => fs::write(&p, out).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{out}"),
    }
    Ok(())
}
