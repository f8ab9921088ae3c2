//! The trainable caption policy: a windowed-history MLP over token
//! embeddings and frozen image features, with exact log-likelihoods and
//! hand-derived gradients.
//!
//! ```text
//! x      = [emb(h_1); ...; emb(h_K); f]
//! hidden = tanh(W_h x + b_h)
//! logits = W_out hidden + b_out          (PAD masked to -inf)
//! ```

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::caption::{Caption, Vocab, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::render::{RasterImage, CHANNELS};
use crate::seed::{domain, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyDims {
    pub vocab: usize,
    pub embed: usize,
    pub history: usize,
    pub features: usize,
    pub hidden: usize,
}

impl PolicyDims {
    pub fn new(vocab: usize) -> PolicyDims {
        PolicyDims {
            vocab,
            embed: 32,
            history: 4,
            features: 64,
            hidden: 128,
        }
    }

    pub fn input(&self) -> usize {
        self.embed * self.history + self.features
    }

    fn context(&self) -> usize {
        self.embed * self.history
    }

    pub fn param_count(&self) -> usize {
        self.vocab * self.embed
            + self.hidden * self.input()
            + self.hidden
            + self.vocab * self.hidden
            + self.vocab
    }

    fn offsets(&self) -> [usize; 5] {
        let emb = 0;
        let w_h = emb + self.vocab * self.embed;
        let b_h = w_h + self.hidden * self.input();
        let w_out = b_h + self.hidden;
        let b_out = w_out + self.vocab * self.hidden;
        [emb, w_h, b_h, w_out, b_out]
    }
}

/// Named parameter blocks, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Embeddings,
    HiddenWeight,
    HiddenBias,
    OutputWeight,
    OutputBias,
}

impl Block {
    pub const ALL: [Block; 5] = [
        Block::Embeddings,
        Block::HiddenWeight,
        Block::HiddenBias,
        Block::OutputWeight,
        Block::OutputBias,
    ];
}

/// All trainable parameters as one flat vector of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    dims: PolicyDims,
    data: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> PolicyParams {
        PolicyParams {
            dims,
            data: vec![0.0; dims.param_count()],
        }
    }

    /// Weights and embeddings uniform in (-0.05, 0.05); biases zero.
    pub fn init(dims: PolicyDims, seed: u64) -> PolicyParams {
        let mut p = PolicyParams::zeros(dims);
        let mut rng = rng_for(&[domain::INIT, seed]);
        let uniform = Uniform::new(-0.05, 0.05).expect("valid range");
        for block in [Block::Embeddings, Block::HiddenWeight, Block::OutputWeight] {
            for v in p.block_mut(block) {
                *v = uniform.sample(&mut rng);
            }
        }
        p
    }

    pub fn from_vec(dims: PolicyDims, data: Vec<f64>) -> Result<PolicyParams> {
        if data.len() != dims.param_count() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                dims.param_count(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("parameters must be finite".into()));
        }
        Ok(PolicyParams { dims, data })
    }

    pub fn dims(&self) -> PolicyDims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn block_range(&self, block: Block) -> std::ops::Range<usize> {
        let o = self.dims.offsets();
        let i = Block::ALL
            .iter()
            .position(|&b| b == block)
            .expect("known block");
        o[i]..o.get(i + 1).copied().unwrap_or(self.data.len())
    }

    pub fn block(&self, block: Block) -> &[f64] {
        &self.data[self.block_range(block)]
    }

    pub fn block_mut(&mut self, block: Block) -> &mut [f64] {
        let r = self.block_range(block);
        &mut self.data[r]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with eight interleaved partial sums (fixed order, so results
/// are deterministic; several times faster than a single running sum).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Frozen linear image front-end with per-vector standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    width: usize,
    height: usize,
    dim: usize,
    matrix: Vec<f64>,
}

impl ImageEncoder {
    pub fn new(width: usize, height: usize, dim: usize, seed: u64) -> ImageEncoder {
        let mut rng = rng_for(&[domain::ENCODER, seed]);
        let n = width * height * CHANNELS * dim;
        ImageEncoder {
            width,
            height,
            dim,
            matrix: (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn encode(&self, img: &RasterImage) -> Result<Vec<f64>> {
        if img.width() != self.width || img.height() != self.height {
            return Err(Error::Contract(format!(
                "encoder expects {}x{} images, got {}x{}",
                self.width,
                self.height,
                img.width(),
                img.height()
            )));
        }
        let px = img.pixels();
        let mut out: Vec<f64> = self
            .matrix
            .chunks_exact(px.len())
            .map(|row| dot(row, px))
            .collect();
        let n = out.len() as f64;
        let mean = out.iter().sum::<f64>() / n;
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var == 0.0 {
            out.iter_mut().for_each(|v| *v = 0.0);
        } else {
            let sd = var.sqrt();
            out.iter_mut().for_each(|v| *v = (*v - mean) / sd);
        }
        Ok(out)
    }
}

/// A sampled caption with the log-probabilities of its generated tokens
/// under the sampling distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    pub caption: Caption,
    pub logprobs: Vec<f64>,
}

impl SampledSequence {
    pub fn total_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

/// Last `history` tokens before position `t` of `ids`, left-padded with PAD.
pub fn history_at(ids: &[u32], t: usize, history: usize) -> Vec<u32> {
    let mut h = vec![PAD; history];
    let start = t.saturating_sub(history);
    let got = &ids[start..t];
    h[history - got.len()..].copy_from_slice(got);
    h
}

/// Per-image part of the hidden pre-activation: `b_h + W_h[:, context..] f`.
fn feature_drive(params: &PolicyParams, features: &[f64]) -> Vec<f64> {
    let d = params.dims;
    let w_h = params.block(Block::HiddenWeight);
    let b_h = params.block(Block::HiddenBias);
    (0..d.hidden)
        .map(|j| {
            let row = &w_h[j * d.input() + d.context()..(j + 1) * d.input()];
            b_h[j] + dot(row, features)
        })
        .collect()
}

/// Hidden activations and raw logits for one position.
fn forward(
    params: &PolicyParams,
    drive: &[f64],
    history: &[u32],
    hidden: &mut [f64],
    logits: &mut [f64],
) {
    let d = params.dims;
    let emb = params.block(Block::Embeddings);
    let w_h = params.block(Block::HiddenWeight);
    let mut context = Vec::with_capacity(d.context());
    for &tok in history {
        context.extend_from_slice(&emb[tok as usize * d.embed..(tok as usize + 1) * d.embed]);
    }
    for (j, h) in hidden.iter_mut().enumerate() {
        let row = &w_h[j * d.input()..j * d.input() + d.context()];
        *h = (drive[j] + dot(row, &context)).tanh();
    }
    let w_out = params.block(Block::OutputWeight);
    let b_out = params.block(Block::OutputBias);
    for (v, l) in logits.iter_mut().enumerate() {
        let row = &w_out[v * d.hidden..(v + 1) * d.hidden];
        *l = b_out[v] + dot(row, hidden);
    }
}

/// Raw (unmasked) next-token logits.
pub fn next_token_logits(params: &PolicyParams, features: &[f64], history: &[u32]) -> Vec<f64> {
    let d = params.dims;
    let drive = feature_drive(params, features);
    let mut hidden = vec![0.0; d.hidden];
    let mut logits = vec![0.0; d.vocab];
    forward(params, &drive, history, &mut hidden, &mut logits);
    logits
}

/// Plain log-softmax over every entry.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Log-probabilities of the policy distribution: PAD masked out, logits
/// divided by `temperature`.
pub fn policy_logprobs(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (i, &l) in logits.iter().enumerate() {
        if i != PAD as usize {
            max = max.max(l / temperature);
        }
    }
    let mut sum = 0.0;
    for (i, &l) in logits.iter().enumerate() {
        if i != PAD as usize {
            sum += (l / temperature - max).exp();
        }
    }
    let lse = max + sum.ln();
    for (i, (o, &l)) in out.iter_mut().zip(logits).enumerate() {
        *o = if i == PAD as usize {
            f64::NEG_INFINITY
        } else {
            l / temperature - lse
        };
    }
}

/// Ancestral sampling from BOS until EOS; at `max_len` tokens the last
/// position is forced to EOS and that EOS's log-probability is recorded.
pub fn sample_caption(
    params: &PolicyParams,
    features: &[f64],
    vocab: &Vocab,
    seed: u64,
    temperature: f64,
    max_len: usize,
) -> Result<SampledSequence> {
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if max_len < 2 {
        return Err(Error::Contract("max_len must allow BOS and EOS".into()));
    }
    let d = params.dims;
    let mut rng = rng_for(&[domain::ROLLOUT, seed]);
    let drive = feature_drive(params, features);
    let (mut hidden, mut logits, mut lp) =
        (vec![0.0; d.hidden], vec![0.0; d.vocab], vec![0.0; d.vocab]);
    let mut ids = vec![BOS];
    let mut logprobs = Vec::new();
    loop {
        let hist = history_at(&ids, ids.len(), d.history);
        forward(params, &drive, &hist, &mut hidden, &mut logits);
        policy_logprobs(&logits, temperature, &mut lp);
        let next = if ids.len() + 1 == max_len {
            EOS
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = None;
            for (i, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = Some(i as u32);
                    break;
                }
            }
            // Rounding can leave `acc` a hair below 1.
            pick.unwrap_or_else(|| {
                (0..d.vocab as u32)
                    .rev()
                    .find(|&i| i != PAD)
                    .expect("vocab")
            })
        };
        ids.push(next);
        logprobs.push(lp[next as usize]);
        if next == EOS {
            break;
        }
    }
    Ok(SampledSequence {
        caption: Caption::new(ids, vocab)?,
        logprobs,
    })
}

/// Argmax decoding (lowest ID wins ties), with the same EOS forcing as sampling.
pub fn greedy_caption(
    params: &PolicyParams,
    features: &[f64],
    vocab: &Vocab,
    max_len: usize,
) -> Result<Caption> {
    let d = params.dims;
    let drive = feature_drive(params, features);
    let (mut hidden, mut logits) = (vec![0.0; d.hidden], vec![0.0; d.vocab]);
    let mut ids = vec![BOS];
    loop {
        let next = if ids.len() + 1 >= max_len {
            EOS
        } else {
            let hist = history_at(&ids, ids.len(), d.history);
            forward(params, &drive, &hist, &mut hidden, &mut logits);
            let mut best = None::<(u32, f64)>;
            for (i, &l) in logits.iter().enumerate() {
                if i != PAD as usize && best.is_none_or(|(_, b)| l > b) {
                    best = Some((i as u32, l));
                }
            }
            best.expect("non-empty vocabulary").0
        };
        ids.push(next);
        if next == EOS {
            break;
        }
    }
    Caption::new(ids, vocab)
}

/// Cached forward pass over a caption's generated positions.
#[derive(Debug, Clone)]
pub struct Trace {
    hidden: Vec<f64>,
    probs: Vec<f64>,
    pub logprobs: Vec<f64>,
}

/// Teacher-forced forward pass at temperature 1.
pub fn trace(params: &PolicyParams, features: &[f64], caption: &Caption) -> Trace {
    let d = params.dims;
    let ids = caption.ids();
    let steps = caption.generated().len();
    let drive = feature_drive(params, features);
    let mut hidden = vec![0.0; steps * d.hidden];
    let mut probs = vec![0.0; steps * d.vocab];
    let mut logprobs = Vec::with_capacity(steps);
    let (mut logits, mut lp) = (vec![0.0; d.vocab], vec![0.0; d.vocab]);
    for s in 0..steps {
        let t = s + 1;
        let hist = history_at(ids, t, d.history);
        let h = &mut hidden[s * d.hidden..(s + 1) * d.hidden];
        forward(params, &drive, &hist, h, &mut logits);
        policy_logprobs(&logits, 1.0, &mut lp);
        for (p, l) in probs[s * d.vocab..(s + 1) * d.vocab].iter_mut().zip(&lp) {
            *p = l.exp();
        }
        logprobs.push(lp[ids[t] as usize]);
    }
    Trace {
        hidden,
        probs,
        logprobs,
    }
}

/// Total and per-token log-likelihood of the generated part of `caption`.
pub fn logprob_of(params: &PolicyParams, features: &[f64], caption: &Caption) -> (f64, Vec<f64>) {
    let lp = trace(params, features, caption).logprobs;
    (lp.iter().sum(), lp)
}

/// Add `sum_t weights[t] * grad(log pi(token_t))` into `grad`.
pub fn backprop(
    params: &PolicyParams,
    features: &[f64],
    caption: &Caption,
    trace: &Trace,
    weights: &[f64],
    grad: &mut [f64],
) {
    let d = params.dims;
    let ids = caption.ids();
    debug_assert_eq!(weights.len(), trace.logprobs.len());
    debug_assert_eq!(grad.len(), params.data.len());
    let [o_emb, o_wh, o_bh, o_wout, o_bout] = d.offsets();
    let w_h = params.block(Block::HiddenWeight);
    let w_out = params.block(Block::OutputWeight);

    let mut g_logits = vec![0.0; d.vocab];
    let mut g_z = vec![0.0; d.hidden];
    let mut g_z_total = vec![0.0; d.hidden];
    for (s, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let t = s + 1;
        let target = ids[t] as usize;
        let hidden = &trace.hidden[s * d.hidden..(s + 1) * d.hidden];
        let probs = &trace.probs[s * d.vocab..(s + 1) * d.vocab];
        for (v, g) in g_logits.iter_mut().enumerate() {
            let onehot = if v == target { 1.0 } else { 0.0 };
            *g = w * (onehot - probs[v]);
        }
        // Output layer.
        g_z.iter_mut().for_each(|g| *g = 0.0);
        for (v, &gl) in g_logits.iter().enumerate() {
            if gl == 0.0 {
                continue;
            }
            grad[o_bout + v] += gl;
            let gw = &mut grad[o_wout + v * d.hidden..o_wout + (v + 1) * d.hidden];
            let row = &w_out[v * d.hidden..(v + 1) * d.hidden];
            for (g, a) in gw.iter_mut().zip(hidden) {
                *g += gl * a;
            }
            for (g, r) in g_z.iter_mut().zip(row) {
                *g += gl * r;
            }
        }
        // tanh.
        for (g, a) in g_z.iter_mut().zip(hidden) {
            *g *= 1.0 - a * a;
        }
        // Hidden layer, context part; the feature part is accumulated once below.
        let hist = history_at(ids, t, d.history);
        let emb = params.block(Block::Embeddings);
        let (g_emb, g_rest) = grad[o_emb..].split_at_mut(o_wh - o_emb);
        for j in 0..d.hidden {
            let gz = g_z[j];
            g_z_total[j] += gz;
            g_rest[o_bh - o_wh + j] += gz;
            let row_off = j * d.input();
            for (k, &tok) in hist.iter().enumerate() {
                let e_off = tok as usize * d.embed;
                let col = row_off + k * d.embed;
                let e = &emb[e_off..e_off + d.embed];
                let w = &w_h[col..col + d.embed];
                let gw = &mut g_rest[col..col + d.embed];
                for (g, x) in gw.iter_mut().zip(e) {
                    *g += gz * x;
                }
                let ge = &mut g_emb[e_off..e_off + d.embed];
                for (g, x) in ge.iter_mut().zip(w) {
                    *g += gz * x;
                }
            }
        }
    }
    for (j, &gz) in g_z_total.iter().enumerate() {
        if gz == 0.0 {
            continue;
        }
        let row = &mut grad[o_wh + j * d.input() + d.context()..o_wh + (j + 1) * d.input()];
        for (g, f) in row.iter_mut().zip(features) {
            *g += gz * f;
        }
    }
}

/// Exact gradient of the total log-likelihood of `caption`.
pub fn grad_logprob(params: &PolicyParams, features: &[f64], caption: &Caption) -> Vec<f64> {
    let tr = trace(params, features, caption);
    let mut grad = vec![0.0; params.data.len()];
    backprop(
        params,
        features,
        caption,
        &tr,
        &vec![1.0; tr.logprobs.len()],
        &mut grad,
    );
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::caption_from_text;
    use crate::render::RendererConfig;
    use crate::world::{sample_scene, WorldConfig};

    fn setup() -> (Vocab, PolicyParams, Vec<f64>) {
        let vocab = Vocab::new(8);
        let params = PolicyParams::init(PolicyDims::new(vocab.len()), 1);
        let img = crate::render::render_scene(
            &sample_scene(3, &WorldConfig::default()).unwrap(),
            &RendererConfig::exact(),
        );
        let features = ImageEncoder::new(64, 64, 64, 9).encode(&img).unwrap();
        (vocab, params, features)
    }

    #[test]
    fn encoder_standardizes() {
        let enc = ImageEncoder::new(64, 64, 64, 2);
        let img = crate::render::render_scene(
            &sample_scene(4, &WorldConfig::default()).unwrap(),
            &RendererConfig::exact(),
        );
        let f = enc.encode(&img).unwrap();
        assert_eq!(f, enc.encode(&img).unwrap());
        let mean = f.iter().sum::<f64>() / 64.0;
        let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);

        let black = RasterImage::filled(64, 64, [0.0; 3]);
        assert!(enc.encode(&black).unwrap().iter().all(|&v| v == 0.0));
        assert!(enc.encode(&RasterImage::filled(32, 32, [0.0; 3])).is_err());
    }

    #[test]
    fn history_padding() {
        assert_eq!(history_at(&[BOS], 1, 4), vec![PAD, PAD, PAD, BOS]);
        assert_eq!(history_at(&[0, 5, 6, 7, 8, 9], 6, 4), vec![6, 7, 8, 9]);
    }

    #[test]
    fn zero_params_are_uniform() {
        let vocab = Vocab::new(8);
        let p = PolicyParams::zeros(PolicyDims::new(vocab.len()));
        let logits = next_token_logits(&p, &[0.3; 64], &[PAD, PAD, PAD, BOS]);
        for l in log_softmax(&logits) {
            assert!((l + (36f64).ln()).abs() < 1e-15);
        }
        let cap = caption_from_text("red small circle AT r2 c3", &vocab).unwrap();
        let (total, per) = logprob_of(&p, &[0.3; 64], &cap);
        assert_eq!(per.len(), 7);
        assert!((total + 7.0 * (35f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn normalization() {
        let (_, p, f) = setup();
        let mut lp = vec![0.0; 36];
        for hist in [[PAD, PAD, PAD, BOS], [5, 9, 14, 3], [20, 28, 4, 11]] {
            policy_logprobs(&next_token_logits(&p, &f, &hist), 1.0, &mut lp);
            let s: f64 = lp.iter().map(|l| l.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert_eq!(lp[PAD as usize], f64::NEG_INFINITY);
        }
    }

    #[test]
    fn history_changes_logits() {
        let (_, p, f) = setup();
        assert_ne!(
            next_token_logits(&p, &f, &[PAD; 4]),
            next_token_logits(&p, &f, &[PAD, PAD, PAD, BOS])
        );
    }

    #[test]
    fn sampling_is_seeded_and_rescorable() {
        let (v, p, f) = setup();
        for seed in 0..20 {
            let a = sample_caption(&p, &f, &v, seed, 1.0, 48).unwrap();
            assert_eq!(a, sample_caption(&p, &f, &v, seed, 1.0, 48).unwrap());
            assert!(a.caption.ids().len() <= 48);
            assert_eq!(*a.caption.ids().last().unwrap(), EOS);
            assert!(!a.caption.ids().contains(&PAD));
            assert_eq!(a.logprobs.len(), a.caption.generated().len());
            let (total, per) = logprob_of(&p, &f, &a.caption);
            for (x, y) in per.iter().zip(&a.logprobs) {
                assert!((x - y).abs() < 1e-12);
            }
            assert!((total - a.total_logprob()).abs() < 1e-12);
        }
        assert!(sample_caption(&p, &f, &v, 0, 0.0, 48).is_err());
    }

    #[test]
    fn forced_eos_at_max_len() {
        let (v, p, f) = setup();
        let s = sample_caption(&p, &f, &v, 4, 1.0, 3).unwrap();
        assert!(s.caption.ids().len() <= 3);
        assert_eq!(*s.caption.ids().last().unwrap(), EOS);
        assert!(s.logprobs.iter().all(|&l| l <= 0.0 && l.is_finite()));
    }

    #[test]
    fn eos_bias_dominates() {
        let (v, mut p, f) = setup();
        p.block_mut(Block::OutputBias)[EOS as usize] = 10.0;
        let empty = (0..1000)
            .filter(|&s| {
                sample_caption(&p, &f, &v, s, 1.0, 48)
                    .unwrap()
                    .caption
                    .ids()
                    == [BOS, EOS]
            })
            .count();
        assert!(empty >= 990, "{empty}");
    }

    #[test]
    fn empirical_frequencies_match_softmax() {
        let (v, mut p, f) = setup();
        // Sharpen the distribution a little so it is far from uniform.
        p.as_mut_slice().iter_mut().for_each(|x| *x *= 20.0);
        let mut lp = vec![0.0; 36];
        policy_logprobs(
            &next_token_logits(&p, &f, &[PAD, PAD, PAD, BOS]),
            1.0,
            &mut lp,
        );
        let n = 50_000;
        let mut counts = vec![0usize; 36];
        for seed in 0..n {
            let s = sample_caption(&p, &f, &v, seed, 1.0, 2 + 1).unwrap();
            counts[s.caption.ids()[1] as usize] += 1;
        }
        for (c, l) in counts.iter().zip(&lp) {
            let prob = l.exp();
            let sd = (n as f64 * prob * (1.0 - prob)).sqrt();
            assert!(
                (*c as f64 - n as f64 * prob).abs() <= 3.0 * sd + 1.0,
                "{c} vs {prob}"
            );
        }
    }

    #[test]
    fn absent_tokens_get_zero_embedding_gradient() {
        let (v, p, f) = setup();
        let cap = caption_from_text("red small circle AT r2 c3", &v).unwrap();
        let g = grad_logprob(&p, &f, &cap);
        let present: Vec<u32> = cap.ids().iter().copied().chain([PAD]).collect();
        let emb = &g[p.block_range(Block::Embeddings)];
        for tok in 0..36u32 {
            let row = &emb[tok as usize * 32..(tok as usize + 1) * 32];
            // EOS is only ever a target, never history.
            if present.contains(&tok) && tok != EOS {
                assert!(row.iter().any(|&x| x != 0.0), "token {tok}");
            } else {
                assert!(row.iter().all(|&x| x == 0.0), "token {tok}");
            }
        }
    }

    #[test]
    fn gradient_accumulation_is_linear() {
        let (v, p, f) = setup();
        let cap = caption_from_text("blue large star AND circle above star", &v).unwrap();
        let single = grad_logprob(&p, &f, &cap);
        let tr = trace(&p, &f, &cap);
        let ones = vec![1.0; tr.logprobs.len()];
        let mut twice = vec![0.0; single.len()];
        backprop(&p, &f, &cap, &tr, &ones, &mut twice);
        backprop(&p, &f, &cap, &tr, &ones, &mut twice);
        for (a, b) in twice.iter().zip(&single) {
            assert!((a - 2.0 * b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let (v, p, f) = setup();
        let a = greedy_caption(&p, &f, &v, 48).unwrap();
        assert_eq!(a, greedy_caption(&p, &f, &v, 48).unwrap());
        assert!(a.ids().len() <= 48);
    }
}
