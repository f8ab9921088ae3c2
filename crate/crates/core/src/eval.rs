//! Caption scoring against ground-truth scenes.
//!
//! Predicted objects are matched greedily to ground-truth objects of the same
//! category within one grid cell (Chebyshev distance), closest first, then
//! lowest ground-truth index. Omitted attributes count as the renderer's
//! defaults. With `m` matches out of `G` ground-truth objects and `P`
//! predicted objects:
//!
//! | score          | formula                                              | empty cases                     |
//! |----------------|------------------------------------------------------|---------------------------------|
//! | coverage       | `100 m / G`                                          | `G = 0`: 100 if `P = 0`, else 0 |
//! | attribute      | `5 (correct colours + sizes) / 2m`                   | `G = 0`: 5; `m = 0`: 0          |
//! | relation       | `5 (GT relations reproduced between matches) / R`    | `G = 0`: 5; `m = 0`: 0; `R = 0`: 5 |
//! | unified        | `min(100, 0.5 coverage + 10 attribute + 10 relation)` |                                |
//! | hallucination  | `(P - m) / max(1, P)`                                |                                 |

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::caption::{parse_caption, Caption, SceneGraph, Vocab};
use crate::error::{Error, Result};
use crate::policy::{greedy_caption, ImageEncoder, PolicyParams};
use crate::world::{ground_truth_graph, Scene};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CaptionScore {
    pub object_coverage: f64,
    pub attribute_score: f64,
    pub relation_score: f64,
    pub unified_score: f64,
    pub hallucination_rate: f64,
    pub caption_length: f64,
}

/// Aggregate score, capped at 100.
pub fn unified(coverage: f64, attribute: f64, relation: f64) -> f64 {
    (0.5 * coverage + 10.0 * attribute + 10.0 * relation).min(100.0)
}

/// `matches[p] = Some(g)` when predicted object `p` matched ground-truth object `g`.
fn match_objects(pred: &SceneGraph, truth: &SceneGraph, grid: usize) -> Vec<Option<usize>> {
    let mut taken = vec![false; truth.objects.len()];
    pred.objects
        .iter()
        .map(|p| {
            let (_, _, (pr, pc)) = p.resolved(grid);
            let best = truth
                .objects
                .iter()
                .enumerate()
                .filter(|(g, t)| !taken[*g] && t.category == p.category)
                .map(|(g, t)| {
                    let (_, _, (tr, tc)) = t.resolved(grid);
                    (pr.abs_diff(tr).max(pc.abs_diff(tc)), g)
                })
                .filter(|&(d, _)| d <= 1)
                .min();
            best.map(|(_, g)| {
                taken[g] = true;
                g
            })
        })
        .collect()
}

pub fn score_graph(pred: &SceneGraph, truth: &SceneGraph, grid: usize) -> CaptionScore {
    let matches = match_objects(pred, truth, grid);
    let matched = matches.iter().flatten().count();
    let (gt, predicted) = (truth.objects.len(), pred.objects.len());

    let (coverage, attribute, relation) = if gt == 0 {
        (if predicted == 0 { 100.0 } else { 0.0 }, 5.0, 5.0)
    } else if matched == 0 {
        (0.0, 0.0, 0.0)
    } else {
        let mut correct = 0;
        for (p, g) in matches.iter().enumerate() {
            if let Some(g) = g {
                let (pc, ps, _) = pred.objects[p].resolved(grid);
                let (tc, ts, _) = truth.objects[*g].resolved(grid);
                correct += usize::from(pc == tc) + usize::from(ps == ts);
            }
        }
        let attribute = 5.0 * correct as f64 / (2 * matched) as f64;
        let relation = if truth.relations.is_empty() {
            5.0
        } else {
            let pred_of = |g: usize| matches.iter().position(|m| *m == Some(g));
            let hits = truth
                .relations
                .iter()
                .filter(|r| match (pred_of(r.subject), pred_of(r.object)) {
                    (Some(s), Some(o)) => pred
                        .relations
                        .iter()
                        .any(|pr| pr.subject == s && pr.object == o && pr.relation == r.relation),
                    _ => false,
                })
                .count();
            5.0 * hits as f64 / truth.relations.len() as f64
        };
        (100.0 * matched as f64 / gt as f64, attribute, relation)
    };

    CaptionScore {
        object_coverage: coverage,
        attribute_score: attribute,
        relation_score: relation,
        unified_score: unified(coverage, attribute, relation),
        hallucination_rate: (predicted - matched) as f64 / predicted.max(1) as f64,
        caption_length: 0.0,
    }
}

pub fn score_caption(caption: &Caption, scene: &Scene, vocab: &Vocab) -> CaptionScore {
    let pred = parse_caption(caption, vocab);
    CaptionScore {
        caption_length: caption.body().len() as f64,
        ..score_graph(&pred, &ground_truth_graph(scene), vocab.grid())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image_id: usize,
    pub caption: Caption,
    pub score: CaptionScore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: CaptionScore,
}

impl EvalReport {
    fn from_rows(rows: Vec<EvalRow>) -> Result<EvalReport> {
        if rows.is_empty() {
            return Err(Error::Contract(
                "evaluation needs a non-empty dataset".into(),
            ));
        }
        let n = rows.len() as f64;
        let mut mean = CaptionScore::default();
        for r in &rows {
            let s = &r.score;
            mean.object_coverage += s.object_coverage / n;
            mean.attribute_score += s.attribute_score / n;
            mean.relation_score += s.relation_score / n;
            mean.unified_score += s.unified_score / n;
            mean.hallucination_rate += s.hallucination_rate / n;
            mean.caption_length += s.caption_length / n;
        }
        Ok(EvalReport { rows, mean })
    }

    /// `eval.csv`: one row per image, then a `mean` row.
    pub fn to_csv(&self, vocab: &Vocab) -> String {
        let mut out = String::from(
            "image,object_coverage,attribute_score,relation_score,unified_score,hallucination_rate,caption_length,caption\n",
        );
        let line = |out: &mut String, id: &str, s: &CaptionScore, cap: &str| {
            let _ = writeln!(
                out,
                "{id},{},{},{},{},{},{},{cap}",
                s.object_coverage,
                s.attribute_score,
                s.relation_score,
                s.unified_score,
                s.hallucination_rate,
                s.caption_length
            );
        };
        for r in &self.rows {
            let words: Vec<&str> = r.caption.body().iter().map(|&t| vocab.word(t)).collect();
            line(
                &mut out,
                &r.image_id.to_string(),
                &r.score,
                &words.join(" "),
            );
        }
        line(&mut out, "mean", &self.mean, "");
        out
    }

    pub fn summary(&self) -> String {
        let m = &self.mean;
        format!(
            "images {}\nobject coverage {:.2}\nattribute score {:.3}\nrelation score {:.3}\nunified score {:.2}\nhallucination rate {:.4}\nmean caption length {:.2}\n",
            self.rows.len(),
            m.object_coverage,
            m.attribute_score,
            m.relation_score,
            m.unified_score,
            m.hallucination_rate,
            m.caption_length
        )
    }
}

/// Score arbitrary caption producers (e.g. oracle or random baselines).
pub fn evaluate_with<F>(scenes: &[Scene], vocab: &Vocab, mut captioner: F) -> Result<EvalReport>
where
    F: FnMut(usize, &Scene) -> Result<Caption>,
{
    let rows = scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let caption = captioner(i, scene)?;
            let score = score_caption(&caption, scene, vocab);
            Ok(EvalRow {
                image_id: i,
                caption,
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}

/// Greedy-decode a caption for every scene and score it.
pub fn evaluate_policy(
    params: &PolicyParams,
    encoder: &ImageEncoder,
    renderer: &crate::render::RendererConfig,
    scenes: &[Scene],
    vocab: &Vocab,
    max_gen_len: usize,
) -> Result<EvalReport> {
    let rows = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let image = crate::render::render_scene(scene, renderer);
            let features = encoder.encode(&image)?;
            let caption = greedy_caption(params, &features, vocab, max_gen_len)?;
            let score = score_caption(&caption, scene, vocab);
            Ok(EvalRow {
                image_id: i,
                caption,
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}
