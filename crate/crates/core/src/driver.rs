//! End-to-end training runs on disk: resolved config, metrics log and
//! checkpoints under the run's output directory.
//!
//! ```text
//! <out>/config.resolved
//! <out>/metrics.csv
//! <out>/checkpoints/init.ckpt
//! <out>/checkpoints/step-000100.ckpt ...
//! <out>/checkpoints/final.ckpt
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::caption::Vocab;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::run::RunConfig;
use crate::trainer::{StepMetrics, TrainState, Trainer, METRICS_HEADER};
use crate::world::Scene;

pub const RESOLVED_NAME: &str = "config.resolved";
pub const METRICS_NAME: &str = "metrics.csv";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; 0 uses the machine's parallelism.
    pub threads: usize,
    /// Continue from this checkpoint instead of initializing.
    pub resume: Option<PathBuf>,
    /// Stop once this many steps are complete, without changing the schedule.
    pub stop_after: Option<u64>,
    /// Periodic checkpoint interval in steps; 0 disables periodic saves.
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub steps_done: u64,
    pub total_steps: u64,
    pub last_checkpoint: PathBuf,
    pub metrics: Vec<StepMetrics>,
}

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

pub fn step_checkpoint(out: &Path, step: u64) -> PathBuf {
    checkpoint_dir(out).join(format!("step-{step:06}.ckpt"))
}

/// Run (or continue) training as configured, writing everything under
/// `cfg.out_dir`; `on_step` sees every step's metrics as they are logged. On
/// a numerical failure the error names the last checkpoint written, which
/// stays on disk.
pub fn train(
    cfg: &RunConfig,
    scenes: &[Scene],
    opts: &RunOptions,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<RunOutcome> {
    let out = cfg.out_dir.clone();
    let ck_dir = checkpoint_dir(&out);
    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let resolved = cfg.to_key_values();
    let resolved_path = out.join(RESOLVED_NAME);
    fs::write(&resolved_path, resolved.to_string()).map_err(|e| Error::io(&resolved_path, e))?;

    let vocab = Vocab::new(cfg.renderer.grid);
    let (state, mut last_checkpoint) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            (ck.state, path.clone())
        }
        None => {
            let state = TrainState::initial(&cfg.train, &vocab, &cfg.world)?;
            let path = ck_dir.join("init.ckpt");
            save(&resolved, &state, &path)?;
            (state, path)
        }
    };
    let start = state.step;
    let mut trainer = Trainer::with_state(
        cfg.train.clone(),
        cfg.renderer.clone(),
        cfg.metric.clone(),
        scenes,
        state,
        opts.threads,
    )?;

    let metrics_path = out.join(METRICS_NAME);
    let mut log = open_metrics(&metrics_path, start)?;
    let total = trainer.total_steps();
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let mut metrics = Vec::new();
    while trainer.state().step < stop {
        let m = trainer.step().map_err(|e| match e {
            Error::Numerical { step, detail } => Error::Numerical {
                step,
                detail: format!(
                    "{detail}; last good checkpoint {}",
                    last_checkpoint.display()
                ),
            },
            other => other,
        })?;
        writeln!(log, "{}", m.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        on_step(&m);
        metrics.push(m);
        let done = trainer.state().step;
        if opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0 && done < total {
            last_checkpoint = step_checkpoint(&out, done);
            save(&resolved, trainer.state(), &last_checkpoint)?;
        }
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let done = trainer.state().step;
    if done >= total {
        last_checkpoint = ck_dir.join("final.ckpt");
        save(&resolved, trainer.state(), &last_checkpoint)?;
    } else if done != start && last_checkpoint != step_checkpoint(&out, done) {
        last_checkpoint = step_checkpoint(&out, done);
        save(&resolved, trainer.state(), &last_checkpoint)?;
    }
    Ok(RunOutcome {
        steps_done: done,
        total_steps: total,
        last_checkpoint,
        metrics,
    })
}

fn save(config: &crate::config::KeyValues, state: &TrainState, path: &Path) -> Result<()> {
    Checkpoint {
        config: config.clone(),
        state: state.clone(),
    }
    .save(path)
}

/// Open the metrics log for appending rows from `start` on, keeping only the
/// rows of earlier steps.
fn open_metrics(path: &Path, start: u64) -> Result<std::io::BufWriter<fs::File>> {
    let mut kept = format!("{METRICS_HEADER}\n");
    if start > 0 {
        let old = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for line in old.lines().skip(1) {
            let step: u64 = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format {
                    kind: "metrics",
                    detail: format!("bad row {line:?}"),
                })?;
            if step < start {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    let f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

/// Read a metrics log back into rows.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format {
            kind: "metrics",
            detail: format!("{} lacks the metrics header", path.display()),
        });
    }
    lines
        .map(|line| {
            let bad = || Error::Format {
                kind: "metrics",
                detail: format!("bad row {line:?}"),
            };
            let f: Vec<f64> = line
                .split(',')
                .map(|s| s.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            if f.len() != 10 {
                return Err(bad());
            }
            Ok(StepMetrics {
                step: f[0] as u64,
                lr: f[1],
                mean_reward: f[2],
                max_reward: f[3],
                mean_abs_advantage: f64::NAN,
                loss: f[4],
                surrogate: f[5],
                kl: f[6],
                clip_fraction: f[7],
                grad_norm: f[8],
                mean_len: f[9],
            })
        })
        .collect()
}

/// Greedy-decode and score every scene with the policy stored in `ck`, using
/// the renderer and encoder settings echoed in its config.
pub fn evaluate_checkpoint(ck: &Checkpoint, scenes: &[Scene]) -> Result<crate::eval::EvalReport> {
    let cfg = RunConfig::resolve(std::slice::from_ref(&ck.config))?;
    let encoder = crate::policy::ImageEncoder::new(
        cfg.renderer.width,
        cfg.renderer.height,
        ck.state.params.dims().features,
        cfg.train.encoder_seed,
    );
    let vocab = Vocab::new(cfg.renderer.grid);
    crate::eval::evaluate_policy(
        &ck.state.params,
        &encoder,
        &cfg.renderer,
        scenes,
        &vocab,
        cfg.train.max_gen_len,
    )
}
