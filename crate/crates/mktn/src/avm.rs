//! Adaptive video-query matching: pairwise similarity, the annealed
//! negative-selection threshold, shared-subspace projection, and the
//! self-weighted cross-modal contrastive loss.

use ndarray::Array2;

use crate::config::{ModelConfig, ScheduleMode, ThetaMode};
use crate::nn::{Bound, EncoderBlock, ParamStore};
use crate::tape::{Tape, Var};

/// Pairwise video-query scores, rows = videos, columns = queries.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub scores: Array2<f64>,
    pub video_ids: Vec<String>,
    pub query_ids: Vec<String>,
}

impl SimilarityMatrix {
    pub fn new(scores: Array2<f64>, video_ids: Vec<String>, query_ids: Vec<String>) -> Self {
        assert_eq!(scores.nrows(), video_ids.len());
        assert_eq!(scores.ncols(), query_ids.len());
        debug_assert!(unique(&video_ids) && unique(&query_ids), "ids must be unique");
        SimilarityMatrix { scores, video_ids, query_ids }
    }
}

fn unique(ids: &[String]) -> bool {
    let mut sorted: Vec<_> = ids.iter().collect();
    sorted.sort();
    sorted.windows(2).all(|w| w[0] != w[1])
}

/// Scalar similarity of one (video, query): the full `N_v x N_q`
/// frame-word score matrix `V (Q W_S)^T` on global frame slots, reduced by
/// max over all entries. One strongly matching frame-word pair is evidence
/// of relevance, so the max is the most conservative false-negative
/// detector.
pub fn pairwise_similarity(globals: &Array2<f64>, words: &Array2<f64>, w_s: &Array2<f64>) -> f64 {
    assert_eq!(globals.ncols(), w_s.nrows(), "frame dim vs projection");
    assert_eq!(words.ncols(), w_s.nrows(), "word dim vs projection");
    let projected = words.dot(w_s);
    let scores = globals.dot(&projected.t());
    scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Dynamic threshold at training progress `r` in [0,1].
pub fn threshold_schedule(r: f64, cfg: &ModelConfig) -> f64 {
    debug_assert!((0.0..=1.0).contains(&r));
    let delta = cfg.threshold_final - cfg.threshold_initial;
    match cfg.schedule_mode {
        ScheduleMode::HalfCosine => {
            // Endpoints returned directly: the contract is exact there and
            // `final - delta` need not round back to `initial`.
            if r == 0.0 {
                cfg.threshold_initial
            } else if r == 1.0 {
                cfg.threshold_final
            } else {
                cfg.threshold_final - delta * ((r * std::f64::consts::PI).cos() + 1.0) / 2.0
            }
        }
        ScheduleMode::Literal => {
            cfg.threshold_final - delta * (r * std::f64::consts::PI + 1.0).cos()
        }
    }
}

/// Surviving negatives per query: video i stays a negative of query j iff
/// it was one originally and `S[i,j] < phi`. Queries whose set empties out
/// are skipped by the contrastive terms for the step.
#[derive(Debug, Clone)]
pub struct NegativeSet {
    /// Per query (column order of the similarity matrix): surviving video
    /// row indices, ascending.
    pub per_query: Vec<Vec<usize>>,
}

impl NegativeSet {
    pub fn is_empty_for(&self, query: usize) -> bool {
        self.per_query[query].is_empty()
    }

    pub fn empty_queries(&self) -> Vec<usize> {
        (0..self.per_query.len()).filter(|&q| self.is_empty_for(q)).collect()
    }
}

/// `original[j]` lists the video row indices that are a-priori negatives of
/// query j (everything but its positive).
pub fn select_negatives(s: &SimilarityMatrix, phi: f64, original: &[Vec<usize>]) -> NegativeSet {
    assert_eq!(original.len(), s.scores.ncols(), "one candidate list per query");
    let per_query = original
        .iter()
        .enumerate()
        .map(|(j, candidates)| {
            let mut keep: Vec<usize> =
                candidates.iter().copied().filter(|&i| s.scores[[i, j]] < phi).collect();
            keep.sort_unstable();
            keep
        })
        .collect();
    NegativeSet { per_query }
}

/// The shared-subspace projector: one transformer-encoder block whose
/// weights are shared across modalities, followed by row-wise L2
/// normalization.
pub struct SharedProjector {
    pub block: EncoderBlock,
}

impl SharedProjector {
    pub fn register(store: &mut ParamStore, seed: u64, cfg: &ModelConfig) {
        EncoderBlock::register(store, seed, "avm.shared", cfg.feature_dim);
    }

    pub fn bind(b: &Bound, cfg: &ModelConfig) -> Self {
        SharedProjector { block: EncoderBlock::bind(b, "avm.shared", cfg.attention_heads) }
    }

    pub fn apply(&self, tape: &mut Tape, rows: Var) -> Var {
        let h = self.block.apply(tape, rows);
        tape.l2_normalize_rows(h)
    }
}

/// Mean of the (unit) rows, re-normalized: the single vector each side of
/// a contrast term contributes.
pub fn pooled_embedding(tape: &mut Tape, shared_rows: Var) -> Var {
    let m = tape.mean_rows(shared_rows);
    tape.l2_normalize_rows(m)
}

/// Balance between query-negative and video-negative terms, from one
/// (pos_video, pos_query, neg_query, neg_video) tuple of pooled unit
/// vectors.
pub fn balance_theta(
    pos_v: &[f64],
    pos_w: &[f64],
    neg_w: &[f64],
    neg_v: &[f64],
    mode: ThetaMode,
) -> f64 {
    match mode {
        // Printed form: numerator equals denominator, so the ratio is 1.
        ThetaMode::FixedHalf => 0.5,
        ThetaMode::MarginRatio => {
            let dist = |a: &[f64], b: &[f64]| {
                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
            };
            let m_w = dist(pos_v, neg_w) - dist(pos_v, pos_w);
            let m_v = dist(pos_w, neg_v) - dist(pos_w, pos_v);
            let (mw2, mv2) = (m_w * m_w, m_v * m_v);
            let theta = (mw2 + THETA_EPS) / (mw2 + mv2 + 2.0 * THETA_EPS);
            theta.clamp(0.05, 0.95)
        }
    }
}

const THETA_EPS: f64 = 1e-15;

/// Differentiable theta on pooled `[1,d]` embeddings; mirrors
/// [`balance_theta`].
pub fn balance_theta_taped(
    tape: &mut Tape,
    pos_v: Var,
    pos_w: Var,
    neg_w: Var,
    neg_v: Var,
    mode: ThetaMode,
) -> Var {
    match mode {
        ThetaMode::FixedHalf => tape.scalar(0.5),
        ThetaMode::MarginRatio => {
            let mut dist = |a: Var, b: Var| {
                let diff = tape.sub(a, b);
                let sq = tape.mul(diff, diff);
                let s = tape.sum_all(sq);
                tape.sqrt(s)
            };
            let d_vn = dist(pos_v, neg_w);
            let d_vp = dist(pos_v, pos_w);
            let d_wn = dist(pos_w, neg_v);
            let d_wp = dist(pos_w, pos_v);
            let m_w = tape.sub(d_vn, d_vp);
            let m_v = tape.sub(d_wn, d_wp);
            let mw2 = tape.mul(m_w, m_w);
            let mv2 = tape.mul(m_v, m_v);
            let num = tape.add_scalar(mw2, THETA_EPS);
            let s = tape.add(mw2, mv2);
            let den = tape.add_scalar(s, 2.0 * THETA_EPS);
            let theta = tape.div(num, den);
            tape.clamp(theta, 0.05, 0.95)
        }
    }
}

/// One contrast unit: a positive pair plus up to one negative on each
/// side, with its balance weight.
pub struct ContrastTriplet {
    /// Pooled unit embedding of the positive video.
    pub pos_video: Var,
    /// Pooled unit embedding of the positive query.
    pub pos_query: Var,
    pub neg_query: Option<Var>,
    pub neg_video: Option<Var>,
    pub theta: Var,
}

/// Hinge contrastive loss over the triplets:
/// `sum theta * max(0, margin - S(v+,w+) + S(v+,w-))
///     + (1-theta) * max(0, margin - S(w+,v+) + S(w+,v-))`,
/// where `S` is the dot product of pooled unit embeddings. Missing
/// negatives contribute nothing; no triplets means zero loss.
pub fn contrastive_loss(tape: &mut Tape, triplets: &[ContrastTriplet], margin: f64) -> Var {
    let mut total = tape.scalar(0.0);
    for t in triplets {
        let pos_sim = dot(tape, t.pos_video, t.pos_query);
        if let Some(neg_w) = t.neg_query {
            let neg_sim = dot(tape, t.pos_video, neg_w);
            let gap = tape.sub(neg_sim, pos_sim);
            let arg = tape.add_scalar(gap, margin);
            let hinge = tape.relu(arg);
            let weighted = tape.mul(t.theta, hinge);
            total = tape.add(total, weighted);
        }
        if let Some(neg_v) = t.neg_video {
            let neg_sim = dot(tape, t.pos_query, neg_v);
            let gap = tape.sub(neg_sim, pos_sim);
            let arg = tape.add_scalar(gap, margin);
            let hinge = tape.relu(arg);
            let neg_theta = tape.neg(t.theta);
            let one_minus = tape.add_scalar(neg_theta, 1.0);
            let weighted = tape.mul(one_minus, hinge);
            total = tape.add(total, weighted);
        }
    }
    total
}

fn dot(tape: &mut Tape, a: Var, b: Var) -> Var {
    let bt = tape.transpose(b);
    tape.matmul(a, bt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn sched_cfg(mode: ScheduleMode) -> ModelConfig {
        ModelConfig {
            threshold_initial: 0.1,
            threshold_final: 0.5,
            schedule_mode: mode,
            ..Default::default()
        }
    }

    #[test]
    fn half_cosine_hits_endpoints_and_midpoint() {
        let cfg = sched_cfg(ScheduleMode::HalfCosine);
        assert_eq!(threshold_schedule(0.0, &cfg), 0.1);
        assert!((threshold_schedule(1.0, &cfg) - 0.5).abs() < 1e-15);
        assert!((threshold_schedule(0.5, &cfg) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn literal_mode_reproduces_printed_formula() {
        let cfg = sched_cfg(ScheduleMode::Literal);
        // 0.5 - 0.4*cos(1)
        assert!((threshold_schedule(0.0, &cfg) - 0.2838790776527441).abs() < 1e-12);
    }

    #[test]
    fn half_cosine_is_monotone() {
        let cfg = sched_cfg(ScheduleMode::HalfCosine);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=1000 {
            let phi = threshold_schedule(k as f64 / 1000.0, &cfg);
            assert!(phi >= prev - 1e-15);
            prev = phi;
        }
    }

    #[test]
    fn pairwise_similarity_degenerate_cases() {
        let eye = Array2::eye(3);
        let u = array![[0.6, 0.8, 0.0]];
        assert!((pairwise_similarity(&u, &u, &eye) - 1.0).abs() < 1e-12);
        let v = array![[0.0, 0.0, 1.0]];
        assert!(pairwise_similarity(&u, &v, &eye).abs() < 1e-12);
    }

    #[test]
    fn pairwise_similarity_is_max_over_entries() {
        let mut rng = crate::rng::stream_rng(1, "avm-pairwise");
        let g = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let w = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let ws = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let got = pairwise_similarity(&g, &w, &ws);
        let mut expect = f64::NEG_INFINITY;
        for i in 0..2 {
            for j in 0..2 {
                let mut dot = 0.0;
                for k in 0..3 {
                    let mut proj = 0.0;
                    for l in 0..3 {
                        proj += w[[j, l]] * ws[[l, k]];
                    }
                    dot += g[[i, k]] * proj;
                }
                expect = expect.max(dot);
            }
        }
        assert!((got - expect).abs() < 1e-12);
    }

    fn sim(scores: Array2<f64>) -> SimilarityMatrix {
        let vids = (0..scores.nrows()).map(|i| format!("v{i}")).collect();
        let qids = (0..scores.ncols()).map(|j| format!("q{j}")).collect();
        SimilarityMatrix::new(scores, vids, qids)
    }

    #[test]
    fn select_filters_by_threshold() {
        let s = sim(array![[0.2], [0.7], [0.4]]);
        let negs = select_negatives(&s, 0.5, &[vec![0, 1, 2]]);
        assert_eq!(negs.per_query[0], vec![0, 2]);

        let none = select_negatives(&s, 0.1, &[vec![0, 1, 2]]);
        assert!(none.is_empty_for(0));
        assert_eq!(none.empty_queries(), vec![0]);

        let all = select_negatives(&s, 0.9, &[vec![0, 1, 2]]);
        assert_eq!(all.per_query[0], vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn selection_shrinks_with_threshold(
            scores in proptest::collection::vec(-1.0..1.0f64, 12),
            phi1 in -1.0..1.0f64,
            dphi in 0.0..1.0f64,
        ) {
            let s = sim(Array2::from_shape_vec((4, 3), scores).unwrap());
            let original: Vec<Vec<usize>> = vec![vec![0, 1, 2, 3]; 3];
            let low = select_negatives(&s, phi1, &original);
            let high = select_negatives(&s, phi1 + dphi, &original);
            for q in 0..3 {
                for i in &low.per_query[q] {
                    prop_assert!(high.per_query[q].contains(i));
                }
            }
        }
    }

    #[test]
    fn shared_projection_rows_are_unit_norm() {
        let cfg = ModelConfig { feature_dim: 4, attention_heads: 2, ..Default::default() };
        let mut store = ParamStore::new();
        SharedProjector::register(&mut store, 8, &cfg);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let proj = SharedProjector::bind(&bound, &cfg);
        let mut rng = crate::rng::stream_rng(8, "avm-norm");
        let x = tape.leaf(Array2::from_shape_fn((5, 4), |_| rng.gen_range(-2.0..2.0)));
        let out = proj.apply(&mut tape, x);
        for row in tape.value(out).rows() {
            let n = row.dot(&row).sqrt();
            assert!((n - 1.0).abs() < 1e-6, "row norm {n}");
        }
    }

    #[test]
    fn linear_projector_is_scale_invariant() {
        let cfg = ModelConfig { feature_dim: 4, attention_heads: 2, ..Default::default() };
        let mut store = ParamStore::new();
        SharedProjector::register(&mut store, 9, &cfg);
        // Zero query/key weights make the attention weights constant, so the
        // whole block is positively homogeneous (biases start at zero).
        *store.get_mut("avm.shared.attn.wq") = Array2::zeros((4, 4));
        *store.get_mut("avm.shared.attn.wk") = Array2::zeros((4, 4));
        let mut rng = crate::rng::stream_rng(9, "avm-scale");
        let x = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));

        let run = |input: Array2<f64>| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let proj = SharedProjector::bind(&bound, &cfg);
            let v = tape.leaf(input);
            let out = proj.apply(&mut tape, v);
            tape.value(out).clone()
        };
        let base = run(x.clone());
        let scaled = run(x.mapv(|v| v * 3.5));
        for (a, b) in base.iter().zip(scaled.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn unit2(angle: f64) -> Vec<f64> {
        vec![angle.cos(), angle.sin()]
    }

    #[test]
    fn theta_fixed_half_ignores_inputs() {
        let a = unit2(0.0);
        let b = unit2(1.0);
        assert_eq!(balance_theta(&a, &b, &b, &a, ThetaMode::FixedHalf), 0.5);
    }

    #[test]
    fn theta_margin_ratio_symmetric_and_asymmetric() {
        // equal margins -> 0.5
        let pv = unit2(0.0);
        let pw = unit2(0.0);
        let n = unit2(1.0);
        let t = balance_theta(&pv, &pw, &n, &n, ThetaMode::MarginRatio);
        assert!((t - 0.5).abs() < 1e-9);

        // margins 0.4 vs 0.2: theta/(1-theta) = 4 => 0.8. With identical
        // positives the margin is just the anchor-negative distance; chord
        // length 2*sin(angle/2).
        let neg_w = unit2(2.0 * (0.2f64).asin());
        let neg_v = unit2(2.0 * (0.1f64).asin());
        let t = balance_theta(&pv, &pw, &neg_w, &neg_v, ThetaMode::MarginRatio);
        assert!((t - 0.8).abs() < 1e-9, "theta {t}");
    }

    #[test]
    fn taped_theta_matches_pure() {
        let mut rng = crate::rng::stream_rng(10, "avm-theta");
        for _ in 0..20 {
            let mut mk = || {
                let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / n).collect::<Vec<f64>>()
            };
            let (pv, pw, nw, nv) = (mk(), mk(), mk(), mk());
            let pure = balance_theta(&pv, &pw, &nw, &nv, ThetaMode::MarginRatio);
            let mut tape = Tape::new();
            let row = |t: &mut Tape, v: &[f64]| t.leaf(Array2::from_shape_vec((1, 4), v.to_vec()).unwrap());
            let (a, b, c, d) =
                (row(&mut tape, &pv), row(&mut tape, &pw), row(&mut tape, &nw), row(&mut tape, &nv));
            let taped = balance_theta_taped(&mut tape, a, b, c, d, ThetaMode::MarginRatio);
            assert!((tape.scalar_value(taped) - pure).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_hinge_values() {
        // positives identical to anchor, negatives orthogonal, margin 0.2
        let mut tape = Tape::new();
        let anchor = tape.leaf(array![[1.0, 0.0]]);
        let pos = tape.leaf(array![[1.0, 0.0]]);
        let neg = tape.leaf(array![[0.0, 1.0]]);
        let theta = tape.scalar(0.5);
        let trip = ContrastTriplet {
            pos_video: anchor,
            pos_query: pos,
            neg_query: Some(neg),
            neg_video: Some(neg),
            theta,
        };
        let l = contrastive_loss(&mut tape, &[trip], 0.2);
        assert_eq!(tape.scalar_value(l), 0.0);

        // positive equals negative: each side contributes its weight times
        // the margin
        let trip = ContrastTriplet {
            pos_video: anchor,
            pos_query: pos,
            neg_query: Some(pos),
            neg_video: Some(anchor),
            theta,
        };
        let l = contrastive_loss(&mut tape, &[trip], 0.2);
        assert!((tape.scalar_value(l) - 0.2).abs() < 1e-12);

        // no negatives -> empty sum
        let trip = ContrastTriplet {
            pos_video: anchor,
            pos_query: pos,
            neg_query: None,
            neg_video: None,
            theta,
        };
        let l = contrastive_loss(&mut tape, &[trip], 0.2);
        assert_eq!(tape.scalar_value(l), 0.0);
    }

    #[test]
    fn contrastive_loss_moves_with_similarities() {
        // finite-difference sign check on the scalar similarity inputs
        let eval = |pos_shift: f64, neg_shift: f64| {
            let mut tape = Tape::new();
            let anchor = tape.leaf(array![[1.0, 0.0]]);
            let pos_raw = tape.leaf(array![[0.8 + pos_shift, 0.3]]);
            let neg_raw = tape.leaf(array![[0.4 + neg_shift, 0.5]]);
            let pos = tape.l2_normalize_rows(pos_raw);
            let neg = tape.l2_normalize_rows(neg_raw);
            let theta = tape.scalar(0.5);
            let trip = ContrastTriplet {
                pos_video: anchor,
                pos_query: pos,
                neg_query: Some(neg),
                neg_video: None,
                theta,
            };
            let l = contrastive_loss(&mut tape, &[trip], 0.5);
            tape.scalar_value(l)
        };
        let base = eval(0.0, 0.0);
        assert!(eval(0.05, 0.0) <= base + 1e-12, "raising positive similarity must not raise loss");
        assert!(eval(0.0, 0.05) >= base - 1e-12, "raising negative similarity must not lower loss");
    }
}
