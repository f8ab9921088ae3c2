//! GRPO fine-tuning loop.
//!
//! Each step has two phases. The rollout phase samples `n` captions per image
//! from the current (old) policy, reconstructs and scores them with the
//! frozen generator, and computes group advantages; it only reads the
//! parameters. The update phase then runs `inner_epochs` AdamW steps on the
//! batch loss. Per-group gradients are computed in parallel and summed in
//! image-ID order, so results are bitwise independent of the thread count.
//!
//! All randomness is keyed by `(master_seed, step, image, rollout)`, which is
//! why a checkpoint only needs the step counter to resume exactly.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::caption::Vocab;
use crate::config::{parse_value, KeyValues};
use crate::error::{Error, Result};
use crate::grpo::{compute_advantages, grpo_loss, LossConfig, LossStats, RatioMode, RolloutGroup};
use crate::policy::{logprob_of, sample_caption, ImageEncoder, PolicyDims, PolicyParams};
use crate::render::{render_scene, RasterImage, RendererConfig};
use crate::seed::{domain, mix, rng_for};
use crate::similarity::{cycle_reward, Similarity, SimilarityMetric};
use crate::warmstart::{warm_start, WarmStartConfig};
use crate::world::{Scene, WorldConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_generations: usize,
    pub epsilon: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<u64>,
    pub inner_epochs: usize,
    pub ratio_mode: RatioMode,
    pub advantage_eps: f64,
    pub master_seed: u64,
    pub encoder_seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub max_gen_len: usize,
    /// Copy the live policy into the reference every this many steps; `None` never refreshes.
    pub ref_refresh: Option<u64>,
    pub warm_start: WarmStartConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_generations: 8,
            epsilon: 0.02,
            beta: 0.04,
            learning_rate: 3e-3,
            batch_size: 16,
            epochs: 1,
            max_steps: None,
            inner_epochs: 2,
            ratio_mode: RatioMode::Token,
            advantage_eps: 1e-8,
            master_seed: 0,
            encoder_seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            temperature: 1.0,
            max_gen_len: 48,
            ref_refresh: None,
            warm_start: WarmStartConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Large-model values: learning rate 1e-5 and batch 64, everything else as default.
    pub fn paper() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_generations < 2 {
            return bad("train.n_generations must be at least 2");
        }
        if !(self.epsilon > 0.0) {
            return bad("train.epsilon must be positive");
        }
        if !(self.beta >= 0.0) {
            return bad("train.beta must be non-negative");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("train.learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 || self.inner_epochs == 0 {
            return bad("train.batch_size and train.inner_epochs must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("train.temperature must be positive");
        }
        if self.max_gen_len < 2 || self.max_gen_len > crate::caption::MAX_LEN {
            return bad("train.max_gen_len must lie in [2, caption capacity]");
        }
        if self.warm_start.steps > 0
            && (self.warm_start.scenes == 0
                || self.warm_start.batch_size == 0
                || !(self.warm_start.learning_rate >= 0.0))
        {
            return bad("train.warm_start_* needs scenes, a batch size and a learning rate");
        }
        if self.ref_refresh == Some(0) {
            return bad("train.ref_refresh must be positive or \"never\"");
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let opt = |v: Option<u64>, none: &str| v.map_or(none.to_string(), |x| x.to_string());
        kv.set("train.n_generations", self.n_generations);
        kv.set("train.epsilon", self.epsilon);
        kv.set("train.beta", self.beta);
        kv.set("train.learning_rate", self.learning_rate);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.epochs", self.epochs);
        kv.set("train.max_steps", opt(self.max_steps, "none"));
        kv.set("train.inner_epochs", self.inner_epochs);
        kv.set("train.ratio_mode", self.ratio_mode.name());
        kv.set("train.advantage_eps", self.advantage_eps);
        kv.set("train.master_seed", self.master_seed);
        kv.set("train.encoder_seed", self.encoder_seed);
        kv.set("train.optimizer", "adamw");
        kv.set("train.adam_beta1", self.adam_beta1);
        kv.set("train.adam_beta2", self.adam_beta2);
        kv.set("train.adam_eps", self.adam_eps);
        kv.set("train.weight_decay", self.weight_decay);
        kv.set("train.scheduler", "linear");
        kv.set("train.temperature", self.temperature);
        kv.set("train.max_gen_len", self.max_gen_len);
        kv.set("train.ref_refresh", opt(self.ref_refresh, "never"));
        kv.set("train.warm_start_steps", self.warm_start.steps);
        kv.set("train.warm_start_scenes", self.warm_start.scenes);
        kv.set("train.warm_start_batch", self.warm_start.batch_size);
        kv.set("train.warm_start_lr", self.warm_start.learning_rate);
        kv
    }

    /// Apply one `train.*` key. Returns `Ok(false)` for keys outside this section.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let opt = |none: &str| -> Result<Option<u64>> {
            if value == none {
                Ok(None)
            } else {
                parse_value(key, value).map(Some)
            }
        };
        match key {
            "train.n_generations" => self.n_generations = parse_value(key, value)?,
            "train.epsilon" => self.epsilon = parse_value(key, value)?,
            "train.beta" => self.beta = parse_value(key, value)?,
            "train.learning_rate" => self.learning_rate = parse_value(key, value)?,
            "train.batch_size" => self.batch_size = parse_value(key, value)?,
            "train.epochs" => self.epochs = parse_value(key, value)?,
            "train.max_steps" => self.max_steps = opt("none")?,
            "train.inner_epochs" => self.inner_epochs = parse_value(key, value)?,
            "train.ratio_mode" => {
                self.ratio_mode = RatioMode::from_name(value)
                    .ok_or_else(|| Error::Config(format!("{key}: unknown mode {value:?}")))?
            }
            "train.advantage_eps" => self.advantage_eps = parse_value(key, value)?,
            "train.master_seed" => self.master_seed = parse_value(key, value)?,
            "train.encoder_seed" => self.encoder_seed = parse_value(key, value)?,
            "train.optimizer" if value == "adamw" => {}
            "train.scheduler" if value == "linear" => {}
            "train.optimizer" | "train.scheduler" => {
                return Err(Error::Config(format!("{key}: unsupported value {value:?}")))
            }
            "train.adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "train.adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "train.adam_eps" => self.adam_eps = parse_value(key, value)?,
            "train.weight_decay" => self.weight_decay = parse_value(key, value)?,
            "train.temperature" => self.temperature = parse_value(key, value)?,
            "train.max_gen_len" => self.max_gen_len = parse_value(key, value)?,
            "train.ref_refresh" => self.ref_refresh = opt("never")?,
            "train.warm_start_steps" => self.warm_start.steps = parse_value(key, value)?,
            "train.warm_start_scenes" => self.warm_start.scenes = parse_value(key, value)?,
            "train.warm_start_batch" => self.warm_start.batch_size = parse_value(key, value)?,
            "train.warm_start_lr" => self.warm_start.learning_rate = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in kv.iter() {
            if k.starts_with("train.") && !cfg.set(k, v)? {
                return Err(Error::Config(format!("unknown key {k}")));
            }
        }
        Ok(cfg)
    }

    fn loss(&self) -> LossConfig {
        LossConfig {
            epsilon: self.epsilon,
            beta: self.beta,
            ratio_mode: self.ratio_mode,
        }
    }
}

/// AdamW moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One decoupled-weight-decay Adam update.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let step = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.adam_eps)
                + cfg.weight_decay * params[i];
            params[i] -= lr * step;
        }
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub adam: AdamState,
    pub step: u64,
}

impl TrainState {
    pub fn fresh(dims: PolicyDims, master_seed: u64) -> TrainState {
        let params = PolicyParams::init(dims, master_seed);
        TrainState {
            reference: params.clone(),
            adam: AdamState::new(dims.param_count()),
            params,
            step: 0,
        }
    }

    /// Random init followed by the warm start configured in `config`; the
    /// reference policy is the warm-started one.
    pub fn initial(config: &TrainConfig, vocab: &Vocab, world: &WorldConfig) -> Result<TrainState> {
        let mut state = Self::fresh(PolicyDims::new(vocab.len()), config.master_seed);
        warm_start(
            &mut state.params,
            vocab,
            world,
            &config.warm_start,
            config.master_seed,
        )?;
        state.reference = state.params.clone();
        Ok(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub mean_reward: f64,
    pub max_reward: f64,
    pub mean_abs_advantage: f64,
    pub loss: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub mean_len: f64,
}

pub const METRICS_HEADER: &str =
    "step,lr,mean_reward,max_reward,loss,surrogate,kl,clip_fraction,grad_norm,mean_len";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.mean_reward,
            self.max_reward,
            self.loss,
            self.surrogate,
            self.kl,
            self.clip_fraction,
            self.grad_norm,
            self.mean_len
        )
    }
}

/// One training image with its frozen-encoder features.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: u64,
    pub scene: Scene,
    pub image: RasterImage,
    pub features: Vec<f64>,
    pub generator_seed: u64,
}

/// Generator seed for an image: fixed for the whole run.
pub fn generator_seed(master_seed: u64, image_id: u64) -> u64 {
    mix(&[domain::GENERATOR, master_seed, image_id])
}

/// Render and encode a dataset.
pub fn prepare_examples(
    scenes: &[Scene],
    renderer: &RendererConfig,
    encoder: &ImageEncoder,
    master_seed: u64,
) -> Result<Vec<Example>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let image = render_scene(scene, renderer);
            let features = encoder.encode(&image)?;
            Ok(Example {
                id: i as u64,
                scene: scene.clone(),
                image,
                features,
                generator_seed: generator_seed(master_seed, i as u64),
            })
        })
        .collect()
}

/// Number of generated tokens excluding EOS, i.e. the caption body length.
fn body_len(seq: &crate::policy::SampledSequence) -> usize {
    seq.caption.body().len()
}

pub struct Trainer {
    config: TrainConfig,
    renderer: RendererConfig,
    similarity: Similarity,
    vocab: Vocab,
    encoder: ImageEncoder,
    examples: Vec<Example>,
    state: TrainState,
    pool: rayon::ThreadPool,
}

impl Trainer {
    /// `threads == 0` uses the machine's parallelism.
    pub fn new(
        config: TrainConfig,
        renderer: RendererConfig,
        metric: SimilarityMetric,
        scenes: &[Scene],
        threads: usize,
    ) -> Result<Trainer> {
        let vocab = Vocab::new(renderer.grid);
        let world = WorldConfig {
            grid: renderer.grid,
            ..WorldConfig::default()
        };
        let state = TrainState::initial(&config, &vocab, &world)?;
        Self::with_state(config, renderer, metric, scenes, state, threads)
    }

    pub fn with_state(
        config: TrainConfig,
        renderer: RendererConfig,
        metric: SimilarityMetric,
        scenes: &[Scene],
        state: TrainState,
        threads: usize,
    ) -> Result<Trainer> {
        config.validate()?;
        renderer.validate()?;
        if scenes.is_empty() {
            return Err(Error::Config("training needs at least one scene".into()));
        }
        let vocab = Vocab::new(renderer.grid);
        if state.params.dims() != PolicyDims::new(vocab.len()) {
            return Err(Error::Config(
                "policy shape does not match the vocabulary".into(),
            ));
        }
        let encoder = ImageEncoder::new(
            renderer.width,
            renderer.height,
            state.params.dims().features,
            config.encoder_seed,
        );
        let examples = prepare_examples(scenes, &renderer, &encoder, config.master_seed)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Trainer {
            similarity: Similarity::new(metric)?,
            config,
            renderer,
            vocab,
            encoder,
            examples,
            state,
            pool,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn encoder(&self) -> &ImageEncoder {
        &self.encoder
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn renderer(&self) -> &RendererConfig {
        &self.renderer
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.examples.len().div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.config
            .max_steps
            .unwrap_or(self.config.epochs as u64 * self.steps_per_epoch())
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    /// Linearly decayed learning rate for `step`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let total = self.total_steps().max(1) as f64;
        self.config.learning_rate * (1.0 - step as f64 / total).max(0.0)
    }

    /// Image IDs of the batch for `step`, sorted.
    pub fn batch_ids(&self, step: u64) -> Vec<u64> {
        let spe = self.steps_per_epoch();
        let (epoch, slot) = (step / spe, (step % spe) as usize);
        let mut order: Vec<u64> = (0..self.examples.len() as u64).collect();
        order.shuffle(&mut rng_for(&[
            domain::SHUFFLE,
            self.config.master_seed,
            epoch,
        ]));
        let b = self.config.batch_size;
        let mut ids = order[slot * b..((slot + 1) * b).min(order.len())].to_vec();
        ids.sort_unstable();
        ids
    }

    /// Rollout phase for one image under the current parameters.
    pub fn rollout(&self, image_id: u64, step: u64) -> Result<RolloutGroup> {
        let ex = &self.examples[image_id as usize];
        let cfg = &self.config;
        let params = &self.state.params;
        let mut samples = Vec::with_capacity(cfg.n_generations);
        let mut rewards = Vec::with_capacity(cfg.n_generations);
        let mut ref_logprobs = Vec::with_capacity(cfg.n_generations);
        for i in 0..cfg.n_generations as u64 {
            let seed = mix(&[cfg.master_seed, step, image_id, i]);
            let mut s = sample_caption(
                params,
                &ex.features,
                &self.vocab,
                seed,
                cfg.temperature,
                cfg.max_gen_len,
            )?;
            if cfg.temperature != 1.0 {
                s.logprobs = logprob_of(params, &ex.features, &s.caption).1;
            }
            rewards.push(cycle_reward(
                &ex.image,
                &s.caption,
                &self.vocab,
                &self.renderer,
                &self.similarity,
                ex.generator_seed,
            )?);
            ref_logprobs.push(if cfg.beta > 0.0 {
                logprob_of(&self.state.reference, &ex.features, &s.caption).1
            } else {
                Vec::new()
            });
            samples.push(s);
        }
        let advantages = compute_advantages(&rewards, cfg.advantage_eps)?;
        Ok(RolloutGroup {
            image_id,
            generator_seed: ex.generator_seed,
            samples,
            rewards,
            advantages,
            ref_logprobs,
        })
    }

    /// Batch loss (mean over groups) and its gradient at the current parameters.
    pub fn batch_loss(&self, groups: &[RolloutGroup]) -> Result<(LossStats, Vec<f64>)> {
        let params = &self.state.params;
        let loss_cfg = self.config.loss();
        let scale = 1.0 / groups.len() as f64;
        let parts: Vec<Result<(LossStats, Vec<f64>)>> = self.pool.install(|| {
            groups
                .par_iter()
                .map(|g| {
                    let mut grad = vec![0.0; params.as_slice().len()];
                    let features = &self.examples[g.image_id as usize].features;
                    let stats = grpo_loss(g, features, params, &loss_cfg, scale, &mut grad)?;
                    Ok((stats, grad))
                })
                .collect()
        });
        let mut total = LossStats::default();
        let mut grad = vec![0.0; params.as_slice().len()];
        for part in parts {
            let (s, g) = part?;
            total.loss += s.loss * scale;
            total.surrogate += s.surrogate * scale;
            total.kl += s.kl * scale;
            total.clipped_tokens += s.clipped_tokens;
            total.tokens += s.tokens;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok((total, grad))
    }

    /// Run one full training step.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.state.step;
        let at_step = |e: Error| match e {
            Error::Numerical { detail, .. } => Error::Numerical { step, detail },
            other => other,
        };
        if let Some(k) = self.config.ref_refresh {
            if step > 0 && step.is_multiple_of(k) {
                self.state.reference = self.state.params.clone();
            }
        }
        let ids = self.batch_ids(step);
        let groups: Vec<RolloutGroup> = {
            let this = &*self;
            this.pool
                .install(|| {
                    ids.par_iter()
                        .map(|&id| this.rollout(id, step))
                        .collect::<Result<_>>()
                })
                .map_err(at_step)?
        };

        let lr = self.learning_rate(step);
        let mu = self.config.inner_epochs as f64;
        let mut metrics = StepMetrics {
            step,
            lr,
            mean_reward: 0.0,
            max_reward: f64::NEG_INFINITY,
            mean_abs_advantage: 0.0,
            loss: 0.0,
            surrogate: 0.0,
            kl: 0.0,
            clip_fraction: 0.0,
            grad_norm: 0.0,
            mean_len: 0.0,
        };
        let rollouts = (groups.len() * self.config.n_generations) as f64;
        for g in &groups {
            for (i, r) in g.rewards.iter().enumerate() {
                metrics.mean_reward += r / rollouts;
                metrics.max_reward = metrics.max_reward.max(*r);
                metrics.mean_abs_advantage += g.advantages[i].abs() / rollouts;
                metrics.mean_len += body_len(&g.samples[i]) as f64 / rollouts;
            }
        }

        for _ in 0..self.config.inner_epochs {
            let (stats, grad) = self.batch_loss(&groups).map_err(at_step)?;
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Numerical {
                    step,
                    detail: format!("gradient norm {norm}"),
                });
            }
            metrics.loss += stats.loss / mu;
            metrics.surrogate += stats.surrogate / mu;
            metrics.kl += stats.kl / mu;
            metrics.clip_fraction += stats.clipped_tokens as f64 / stats.tokens.max(1) as f64 / mu;
            metrics.grad_norm += norm / mu;
            let TrainState { params, adam, .. } = &mut self.state;
            adam.update(params.as_mut_slice(), &grad, lr, &self.config);
        }
        if !self.state.params.is_finite() {
            return Err(Error::Numerical {
                step,
                detail: "parameters became non-finite".into(),
            });
        }
        self.state.step += 1;
        Ok(metrics)
    }
}
