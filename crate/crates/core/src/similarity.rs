//! Image similarity for the cycle reward.
//!
//! Learned perceptual metrics are replaced by frozen, seeded random
//! projections: a per-patch feature comparison (local structure), a pooled
//! global embedding (layout and colour mass), and a blend of the two. All
//! scores lie in `[0, 1]`, higher meaning more similar; cosines are mapped
//! through `(c + 1) / 2`.

use rand_distr::{Distribution, StandardNormal};

use crate::caption::{Caption, Vocab};
use crate::error::{Error, Result};
use crate::render::{reconstruct, RasterImage, RendererConfig, CHANNELS};
use crate::seed::{domain, rng_for};

pub const PATCH: usize = 8;
pub const PATCH_DIM: usize = 16;
pub const POOLED: usize = 16;
pub const GLOBAL_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Pixel,
    PatchFeature,
    GlobalEmbedding,
    PerceptualBlend,
}

impl MetricKind {
    /// Config spelling (`reward.metric`).
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Pixel => "pixel",
            MetricKind::PatchFeature => "patch",
            MetricKind::GlobalEmbedding => "global",
            MetricKind::PerceptualBlend => "blend",
        }
    }

    pub fn from_name(s: &str) -> Option<MetricKind> {
        match s {
            "pixel" => Some(MetricKind::Pixel),
            "patch" | "patch_feature" => Some(MetricKind::PatchFeature),
            "global" | "global_embedding" => Some(MetricKind::GlobalEmbedding),
            "blend" | "perceptual_blend" => Some(MetricKind::PerceptualBlend),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMetric {
    pub kind: MetricKind,
    /// Weight of the patch term in the blend.
    pub blend_weight: f64,
    pub projection_seed: u64,
}

impl Default for SimilarityMetric {
    fn default() -> Self {
        SimilarityMetric {
            kind: MetricKind::PerceptualBlend,
            blend_weight: 0.5,
            projection_seed: 0,
        }
    }
}

impl SimilarityMetric {
    pub fn of_kind(kind: MetricKind) -> Self {
        SimilarityMetric {
            kind,
            ..Default::default()
        }
    }
}

/// A metric with its frozen projections materialized.
#[derive(Debug, Clone)]
pub struct Similarity {
    metric: SimilarityMetric,
    patch_proj: Vec<f64>,
    global_proj: Vec<f64>,
}

fn gaussian_matrix(rows: usize, cols: usize, words: &[u64]) -> Vec<f64> {
    let mut rng = rng_for(words);
    (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect()
}

fn project(matrix: &[f64], input: &[f64], out: &mut [f64]) {
    let cols = input.len();
    for (o, row) in out.iter_mut().zip(matrix.chunks_exact(cols)) {
        *o = crate::policy::dot(row, input);
    }
}

/// Cosine with the conventions: two zero vectors agree (1), a zero vector
/// against a non-zero one is orthogonal (0).
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    match (nu == 0.0, nv == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (nu * nv)).clamp(-1.0, 1.0),
    }
}

impl Similarity {
    pub fn new(metric: SimilarityMetric) -> Result<Similarity> {
        if !(0.0..=1.0).contains(&metric.blend_weight) {
            return Err(Error::Config(format!(
                "reward.blend_weight must lie in [0, 1], got {}",
                metric.blend_weight
            )));
        }
        let patch_in = PATCH * PATCH * CHANNELS;
        let global_in = POOLED * POOLED * CHANNELS;
        Ok(Similarity {
            patch_proj: gaussian_matrix(
                PATCH_DIM,
                patch_in,
                &[domain::PROJECTION, metric.projection_seed, 0],
            ),
            global_proj: gaussian_matrix(
                GLOBAL_DIM,
                global_in,
                &[domain::PROJECTION, metric.projection_seed, 1],
            ),
            metric,
        })
    }

    pub fn metric(&self) -> &SimilarityMetric {
        &self.metric
    }

    /// Score in `[0, 1]`; 1 for identical images under every kind.
    pub fn score(&self, a: &RasterImage, b: &RasterImage) -> Result<f64> {
        if a.width() != b.width() || a.height() != b.height() {
            return Err(Error::Contract(format!(
                "cannot compare a {}x{} image with a {}x{} image",
                a.width(),
                a.height(),
                b.width(),
                b.height()
            )));
        }
        Ok(match self.metric.kind {
            MetricKind::Pixel => pixel_similarity(a, b),
            MetricKind::PatchFeature => self.patch_feature(a, b)?,
            MetricKind::GlobalEmbedding => self.global_embedding(a, b)?,
            MetricKind::PerceptualBlend => {
                let w = self.metric.blend_weight;
                w * self.patch_feature(a, b)? + (1.0 - w) * self.global_embedding(a, b)?
            }
        })
    }

    fn patch_feature(&self, a: &RasterImage, b: &RasterImage) -> Result<f64> {
        let (w, h) = (a.width(), a.height());
        if w % PATCH != 0 || h % PATCH != 0 {
            return Err(Error::Contract(format!(
                "patch metric needs dimensions divisible by {PATCH}, got {w}x{h}"
            )));
        }
        let dim = PATCH * PATCH * CHANNELS;
        let (mut pa, mut pb) = (Vec::with_capacity(dim), Vec::with_capacity(dim));
        let (mut fa, mut fb) = ([0.0; PATCH_DIM], [0.0; PATCH_DIM]);
        let mut total = 0.0;
        let mut count = 0usize;
        for py in (0..h).step_by(PATCH) {
            for px in (0..w).step_by(PATCH) {
                pa.clear();
                pb.clear();
                for y in py..py + PATCH {
                    let row = (y * w + px) * CHANNELS..(y * w + px + PATCH) * CHANNELS;
                    pa.extend_from_slice(&a.pixels()[row.clone()]);
                    pb.extend_from_slice(&b.pixels()[row]);
                }
                total += if pa == pb {
                    1.0
                } else {
                    project(&self.patch_proj, &pa, &mut fa);
                    project(&self.patch_proj, &pb, &mut fb);
                    (cosine(&fa, &fb) + 1.0) / 2.0
                };
                count += 1;
            }
        }
        Ok(total / count as f64)
    }

    fn global_embedding(&self, a: &RasterImage, b: &RasterImage) -> Result<f64> {
        if a.pixels() == b.pixels() {
            return Ok(1.0);
        }
        let (ea, eb) = (self.embed(a)?, self.embed(b)?);
        Ok((cosine(&ea, &eb) + 1.0) / 2.0)
    }

    fn embed(&self, img: &RasterImage) -> Result<Vec<f64>> {
        let pooled = average_pool(img, POOLED)?;
        let mut out = vec![0.0; GLOBAL_DIM];
        project(&self.global_proj, &pooled, &mut out);
        Ok(out)
    }
}

/// Average-pool to `side`×`side` cells, channels interleaved.
pub fn average_pool(img: &RasterImage, side: usize) -> Result<Vec<f64>> {
    let (w, h) = (img.width(), img.height());
    if w % side != 0 || h % side != 0 {
        return Err(Error::Contract(format!(
            "cannot pool a {w}x{h} image to {side}x{side}"
        )));
    }
    let (bw, bh) = (w / side, h / side);
    let norm = (bw * bh) as f64;
    let mut out = vec![0.0; side * side * CHANNELS];
    for y in 0..h {
        for x in 0..w {
            let cell = ((y / bh) * side + x / bw) * CHANNELS;
            let p = img.pixel(x, y);
            for c in 0..CHANNELS {
                out[cell + c] += p[c];
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= norm);
    Ok(out)
}

/// `1 - RMSE` over every channel value.
pub fn pixel_similarity(a: &RasterImage, b: &RasterImage) -> f64 {
    let n = a.pixels().len();
    if n == 0 {
        return 1.0;
    }
    let sse: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    1.0 - (sse / n as f64).sqrt()
}

/// Similarity between `x` and the reconstruction of `caption` under the fixed
/// per-image generator `seed`.
pub fn cycle_reward(
    x: &RasterImage,
    caption: &Caption,
    vocab: &Vocab,
    renderer: &RendererConfig,
    similarity: &Similarity,
    seed: u64,
) -> Result<f64> {
    similarity.score(x, &reconstruct(caption, vocab, renderer, seed))
}
