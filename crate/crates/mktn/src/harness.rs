//! Training, evaluation, throughput benchmarking, and gradient checking.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::feature_io::{compute_iou, Corpus, Segment};
use crate::model::{LossBreakdown, Model, PairPrediction};
use crate::nn::ParamStore;
use crate::rng::stream_rng;
use crate::tape::Tape;

/// Momentum-free adaptive per-parameter step: each scalar keeps a decayed
/// mean of squared gradients and divides its step by the root.
pub struct Optimizer {
    pub learning_rate: f64,
    decay: f64,
    eps: f64,
    accum: BTreeMap<String, Array2<f64>>,
}

impl Optimizer {
    pub fn new(learning_rate: f64) -> Self {
        Optimizer { learning_rate, decay: 0.9, eps: 1e-8, accum: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>) {
        for (name, g) in grads {
            let value = params.get_mut(name);
            let acc = self
                .accum
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(value.dim()));
            for ((v, a), &gi) in value.iter_mut().zip(acc.iter_mut()).zip(g.iter()) {
                *a = self.decay * *a + (1.0 - self.decay) * gi * gi;
                *v -= self.learning_rate * gi / (a.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub loss_curve: Vec<LossBreakdown>,
}

/// Train in place. Batches are video groups (all queries of each selected
/// video together); group order reshuffles deterministically per epoch
/// from the seed.
pub fn train(model: &mut Model, corpus: &Corpus, steps: usize, seed: u64) -> Result<TrainReport> {
    let groups = corpus.groups();
    if groups.is_empty() {
        return Err(Error::InvalidConfig("corpus has no pairs".into()));
    }
    let batch = model.cfg.batch_videos.min(groups.len());
    let mut optimizer = Optimizer::new(model.cfg.learning_rate);
    let mut curve = Vec::with_capacity(steps);

    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut cursor = usize::MAX; // force a shuffle before the first batch
    let mut epoch = 0u64;

    for step in 0..steps {
        if cursor.saturating_add(batch) > groups.len() {
            let mut rng = stream_rng(seed, &format!("shuffle/{epoch}"));
            order.shuffle(&mut rng);
            cursor = 0;
            epoch += 1;
        }
        let selected: Vec<(usize, Vec<usize>)> =
            order[cursor..cursor + batch].iter().map(|&g| groups[g].clone()).collect();
        cursor += batch;

        let progress = step as f64 / steps.max(1) as f64;
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let out = model.batch_forward_bound(&mut tape, &bound, corpus, &selected, progress)?;
        let grads = tape.backward(out.total);

        let mut by_name: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        for (name, var) in bound.iter() {
            if let Some(g) = grads.get(*var) {
                by_name.insert(name.clone(), g.clone());
            }
        }
        optimizer.step(&mut model.params, &by_name);
        curve.push(out.breakdown);
    }
    Ok(TrainReport { steps, loss_curve: curve })
}

#[derive(Debug, Clone, Serialize)]
pub struct RecallEntry {
    pub top_n: usize,
    pub iou: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub pair_count: usize,
    pub video_count: usize,
    pub recalls: Vec<RecallEntry>,
    /// Standalone recall of the auxiliary cross-sentence regression head
    /// (top-1 only); empty when that head is ablated.
    pub csm_recalls: Vec<RecallEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vps: Option<f64>,
}

impl EvalReport {
    /// Recall is nonincreasing in the IoU threshold at fixed n, and
    /// nondecreasing in n at a fixed threshold.
    pub fn check_monotonicity(&self) -> Result<()> {
        let lookup = |n: usize, m: f64| {
            self.recalls.iter().find(|r| r.top_n == n && r.iou == m).map(|r| r.recall)
        };
        for a in &self.recalls {
            for b in &self.recalls {
                if a.top_n == b.top_n && a.iou < b.iou && a.recall < b.recall - 1e-12 {
                    return Err(Error::InvalidConfig(format!(
                        "recall rose with IoU: R@{},{} = {} < R@{},{} = {}",
                        a.top_n, a.iou, a.recall, b.top_n, b.iou, b.recall
                    )));
                }
            }
        }
        for a in &self.recalls {
            if a.top_n > 1 {
                if let Some(r1) = lookup(1, a.iou) {
                    if a.recall < r1 - 1e-12 {
                        return Err(Error::InvalidConfig(format!(
                            "R@{} fell below R@1 at IoU {}",
                            a.top_n, a.iou
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One prediction line for the JSONL output: fine boundaries in frame
/// units and in seconds, plus the span score.
#[derive(Debug, Clone, Serialize)]
pub struct PredictionLine {
    pub query_id: String,
    pub t_s_frames: f64,
    pub t_e_frames: f64,
    pub t_s_seconds: f64,
    pub t_e_seconds: f64,
    pub score: f64,
}

/// Run inference over the whole corpus, grouped per video (each video
/// encoded once). Returns per-pair predictions indexed like
/// `corpus.pairs`.
pub fn predict_corpus(model: &Model, corpus: &Corpus, top_k: usize) -> Result<Vec<PairPrediction>> {
    let mut out: Vec<Option<PairPrediction>> = vec![None; corpus.pairs.len()];
    for (v, pair_idxs) in corpus.groups() {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let repr = model.video_repr(&mut tape, &bound, &corpus.videos[v].grid)?;
        let words: Vec<&Array2<f64>> = pair_idxs.iter().map(|&p| &corpus.queries[p].words).collect();
        let preds = model.predict_group(&mut tape, &bound, &repr, &words, top_k);
        for (k, p) in pair_idxs.iter().zip(preds) {
            out[*k] = Some(p);
        }
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

/// R@n, IoU=m over the corpus: the fraction of queries whose top-n spans
/// contain at least one with IoU >= m against ground truth.
pub fn evaluate(model: &Model, corpus: &Corpus, top_ns: &[usize], ious: &[f64]) -> Result<EvalReport> {
    let max_n = top_ns.iter().copied().max().unwrap_or(1);
    let preds = predict_corpus(model, corpus, max_n)?;

    let mut recalls = Vec::new();
    for &n in top_ns {
        for &m in ious {
            let hits = preds
                .iter()
                .enumerate()
                .filter(|(p, pred)| {
                    let gt = corpus.gt_segment(*p);
                    pred.spans.iter().take(n).any(|(seg, _)| compute_iou(*seg, gt) >= m)
                })
                .count();
            recalls.push(RecallEntry { top_n: n, iou: m, recall: hits as f64 / preds.len() as f64 });
        }
    }

    let mut csm_recalls = Vec::new();
    if model.cfg.ablations.csm {
        for &m in ious {
            let hits = preds
                .iter()
                .enumerate()
                .filter(|(p, pred)| {
                    pred.csm_span
                        .map(|seg| compute_iou(seg, corpus.gt_segment(*p)) >= m)
                        .unwrap_or(false)
                })
                .count();
            csm_recalls.push(RecallEntry { top_n: 1, iou: m, recall: hits as f64 / preds.len() as f64 });
        }
    }

    let report = EvalReport {
        pair_count: corpus.pairs.len(),
        video_count: corpus.videos.len(),
        recalls,
        csm_recalls,
        vps: None,
    };
    report.check_monotonicity()?;
    Ok(report)
}

/// Best-span prediction lines for the JSONL interface.
pub fn prediction_lines(model: &Model, corpus: &Corpus) -> Result<Vec<PredictionLine>> {
    let preds = predict_corpus(model, corpus, 1)?;
    let fps = corpus.frames_per_second;
    Ok(preds
        .iter()
        .enumerate()
        .map(|(p, pred)| {
            let (seg, score) = pred.spans[0];
            PredictionLine {
                query_id: corpus.pairs[p].id.clone(),
                t_s_frames: seg.start,
                t_e_frames: seg.end,
                t_s_seconds: seg.start / fps,
                t_e_seconds: seg.end / fps,
                score,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    /// Each distinct video is encoded once per pass; its queries share the
    /// representation.
    MultiPair,
    /// The video representation is rebuilt for every query.
    SinglePair,
}

/// Wall-clock videos per second over `passes` full passes of the corpus
/// (after one untimed warmup pass), sharded over `workers` threads.
pub fn bench_vps(
    model: &Model,
    corpus: &Corpus,
    mode: BenchMode,
    workers: usize,
    passes: usize,
) -> Result<f64> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;

    let groups = corpus.groups();
    let run_group = |(v, pair_idxs): &(usize, Vec<usize>)| -> Result<()> {
        let words: Vec<&Array2<f64>> = pair_idxs.iter().map(|&p| &corpus.queries[p].words).collect();
        match mode {
            BenchMode::MultiPair => {
                let mut tape = Tape::new();
                let bound = model.params.bind(&mut tape);
                let repr = model.video_repr(&mut tape, &bound, &corpus.videos[*v].grid)?;
                model.predict_group(&mut tape, &bound, &repr, &words, 1);
            }
            BenchMode::SinglePair => {
                for w in words {
                    let mut tape = Tape::new();
                    let bound = model.params.bind(&mut tape);
                    let repr = model.video_repr(&mut tape, &bound, &corpus.videos[*v].grid)?;
                    model.predict_group(&mut tape, &bound, &repr, &[w], 1);
                }
            }
        }
        Ok(())
    };
    let run_pass = || -> Result<()> {
        pool.install(|| {
            use rayon::prelude::*;
            groups.par_iter().map(run_group).collect::<Result<Vec<()>>>()
        })?;
        Ok(())
    };

    run_pass()?; // warmup, untimed
    let start = Instant::now();
    for _ in 0..passes.max(1) {
        run_pass()?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok((corpus.videos.len() * passes.max(1)) as f64 / elapsed.max(1e-12))
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub checked_params: usize,
    pub checked_scalars: usize,
    pub eps: f64,
    pub tol: f64,
    pub worst_path: String,
    pub worst_index: usize,
    pub worst_rel_err: f64,
}

/// Central-difference check of the total batch loss against the analytic
/// gradient for every scalar of every parameter whose path starts with
/// `filter` (all parameters when empty). Fails on the first violation with
/// the offending path.
pub fn gradcheck(
    model: &Model,
    corpus: &Corpus,
    groups: &[(usize, Vec<usize>)],
    progress: f64,
    eps: f64,
    tol: f64,
    filter: &str,
) -> Result<GradcheckReport> {
    let loss_with = |params: &ParamStore| -> Result<f64> {
        let probe = Model::from_parts(model.cfg.clone(), params.clone());
        let mut tape = Tape::new();
        let bound = probe.params.bind(&mut tape);
        let out = probe.batch_forward_bound(&mut tape, &bound, corpus, groups, progress)?;
        Ok(out.breakdown.total)
    };

    // analytic pass
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let out = model.batch_forward_bound(&mut tape, &bound, corpus, groups, progress)?;
    let grads = tape.backward(out.total);

    let names: Vec<String> =
        model.params.names().filter(|n| n.starts_with(filter)).cloned().collect();
    let mut worst = (String::new(), 0usize, 0.0f64);
    let mut checked_scalars = 0usize;

    for name in &names {
        let shape = model.params.get(name).dim();
        let analytic = grads
            .get(bound.var(name))
            .cloned()
            .unwrap_or_else(|| Array2::zeros(shape));
        let len = shape.0 * shape.1;
        for idx in 0..len {
            let (i, j) = (idx / shape.1, idx % shape.1);
            let mut plus = model.params.clone();
            plus.get_mut(name)[[i, j]] += eps;
            let mut minus = model.params.clone();
            minus.get_mut(name)[[i, j]] -= eps;
            let numeric = (loss_with(&plus)? - loss_with(&minus)?) / (2.0 * eps);
            let a = analytic[[i, j]];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            checked_scalars += 1;
            if rel > worst.2 {
                worst = (name.clone(), idx, rel);
            }
            if rel > tol {
                return Err(Error::GradMismatch {
                    path: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                    tol,
                });
            }
        }
    }

    Ok(GradcheckReport {
        checked_params: names.len(),
        checked_scalars,
        eps,
        tol,
        worst_path: worst.0,
        worst_index: worst.1,
        worst_rel_err: worst.2,
    })
}

/// Monte-Carlo R@1 baseline of a predictor emitting uniformly random
/// feasible integer spans, against this corpus's ground truth.
pub fn random_span_baseline(corpus: &Corpus, iou: f64, samples: usize, seed: u64) -> f64 {
    use rand::Rng;
    let mut rng = stream_rng(seed, "baseline/random-span");
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, _) in corpus.pairs.iter().enumerate() {
        let v = corpus.video_of_pair(p);
        let n = corpus.videos[v].num_frames();
        let gt = corpus.gt_segment(p);
        for _ in 0..samples {
            let s = rng.gen_range(0..n);
            let e = rng.gen_range(s..n);
            // a span of frames s..=e covers continuous [s, e+1)
            let seg = Segment::new(s as f64, e as f64 + 1.0);
            if compute_iou(seg, gt) >= iou {
                hits += 1;
            }
            total += 1;
        }
    }
    hits as f64 / total as f64
}
