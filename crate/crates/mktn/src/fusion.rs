//! Multi-modal fusion and the grounding head.
//!
//! Co-attention turns a (video, query) pair into a query-guided frame
//! sequence via a bidirectional gated recurrence; the span predictor emits
//! per-frame start/end probability vectors whose constrained joint argmax
//! gives coarse integer boundaries; the float predictor refines them with
//! sigmoid offsets. Batch alignment uses the exponentiated robust
//! contrastive loss over square pair-similarity matrices.

use ndarray::Array2;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Affine, Bound, EncoderBlock, ParamStore};
use crate::tape::{GruVars, Tape, Var};

fn register_gru(store: &mut ParamStore, seed: u64, prefix: &str, d_in: usize, hidden: usize) {
    for part in ["wxz", "wxr", "wxh"] {
        store.add_xavier(seed, &format!("{prefix}.{part}"), d_in, hidden);
    }
    for part in ["whz", "whr", "whh"] {
        store.add_xavier(seed, &format!("{prefix}.{part}"), hidden, hidden);
    }
    for part in ["bz", "br", "bh"] {
        store.add_zeros(&format!("{prefix}.{part}"), 1, hidden);
    }
}

fn bind_gru(b: &Bound, prefix: &str) -> GruVars {
    GruVars {
        wxz: b.var(&format!("{prefix}.wxz")),
        wxr: b.var(&format!("{prefix}.wxr")),
        wxh: b.var(&format!("{prefix}.wxh")),
        whz: b.var(&format!("{prefix}.whz")),
        whr: b.var(&format!("{prefix}.whr")),
        whh: b.var(&format!("{prefix}.whh")),
        bz: b.var(&format!("{prefix}.bz")),
        br: b.var(&format!("{prefix}.br")),
        bh: b.var(&format!("{prefix}.bh")),
    }
}

pub struct CoAttention {
    pub w_s: Var,
    pub gru_fwd: GruVars,
    pub gru_bwd: GruVars,
    pub out: Affine,
}

impl CoAttention {
    pub fn register(store: &mut ParamStore, seed: u64, cfg: &ModelConfig) {
        let d = cfg.feature_dim;
        store.add_xavier(seed, "fusion.w_s", d, d);
        register_gru(store, seed, "fusion.gru.fwd", 4 * d, d / 2);
        register_gru(store, seed, "fusion.gru.bwd", 4 * d, d / 2);
        Affine::register(store, seed, "fusion.out", d, d);
    }

    pub fn bind(b: &Bound) -> Self {
        CoAttention {
            w_s: b.var("fusion.w_s"),
            gru_fwd: bind_gru(b, "fusion.gru.fwd"),
            gru_bwd: bind_gru(b, "fusion.gru.bwd"),
            out: Affine::bind(b, "fusion.out"),
        }
    }

    /// `video`: `[N_v, d]` frame globals; `query`: `[N_q, d]` words.
    /// Returns the fused `[N_v, d]` sequence.
    pub fn apply(&self, tape: &mut Tape, video: Var, query: Var) -> Var {
        let projected = tape.matmul(query, self.w_s);
        let pt = tape.transpose(projected);
        let scores = tape.matmul(video, pt);

        let s_r = tape.softmax_rows(scores, None);
        let st = tape.transpose(scores);
        let s_c_t = tape.softmax_rows(st, None);
        // column-softmax of the scores, shape [N_v, N_q]
        let s_c = tape.transpose(s_c_t);

        let a = tape.matmul(s_r, projected);
        let sct = tape.transpose(s_c);
        let rc = tape.matmul(s_r, sct);
        let b = tape.matmul(rc, video);

        let va = tape.mul(video, a);
        let vb = tape.mul(video, b);
        let x = tape.concat_cols(&[video, a, va, vb]);

        let h_fwd = tape.gru(x, self.gru_fwd);
        let x_rev = tape.reverse_rows(x);
        let h_bwd_rev = tape.gru(x_rev, self.gru_bwd);
        let h_bwd = tape.reverse_rows(h_bwd_rev);
        let h = tape.concat_cols(&[h_fwd, h_bwd]);
        self.out.apply(tape, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RinceDirection {
    /// Negative term sums each row (video against all queries).
    RowWise,
    /// Negative term sums each column (query against all videos).
    ColumnWise,
}

/// Robust InfoNCE over a square similarity matrix with matched pairs on
/// the diagonal: `(1/B) * sum_i [ -exp(S_ii)/tau + (alpha * sum_j exp(S_ij))^tau / tau ]`.
/// `tau` and `alpha` are scalar nodes so they may be learnable.
pub fn rince_loss(
    tape: &mut Tape,
    s: Var,
    direction: RinceDirection,
    tau: Var,
    alpha: Var,
) -> Result<Var> {
    let (rows, cols) = tape.value(s).dim();
    if rows != cols {
        return Err(Error::NonSquare { rows, cols });
    }
    let b = rows;
    let e = tape.exp(s);
    let sums = match direction {
        RinceDirection::RowWise => {
            let ones = tape.leaf(Array2::from_elem((b, 1), 1.0));
            tape.matmul(e, ones)
        }
        RinceDirection::ColumnWise => {
            let ones = tape.leaf(Array2::from_elem((1, b), 1.0));
            let s = tape.matmul(ones, e);
            tape.transpose(s)
        }
    };

    let mut total = tape.scalar(0.0);
    for i in 0..b {
        let diag = tape.elem(e, i, i);
        let pos = tape.div(diag, tau);

        let sum_i = tape.elem(sums, i, 0);
        let scaled = tape.mul(alpha, sum_i);
        let ln = tape.ln(scaled);
        let powed = tape.mul(tau, ln);
        let neg_num = tape.exp(powed);
        let neg = tape.div(neg_num, tau);

        let term = tape.sub(neg, pos);
        total = tape.add(total, term);
    }
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Span head: two stacked transformer blocks, then two feed-forward
/// layers emitting start/end logits per frame.
pub struct SpanPredictor {
    pub blocks: [EncoderBlock; 2],
    pub ff1: Affine,
    pub ff2: Affine,
}

impl SpanPredictor {
    pub fn register(store: &mut ParamStore, seed: u64, cfg: &ModelConfig) {
        let d = cfg.feature_dim;
        EncoderBlock::register(store, seed, "fusion.span.block0", d);
        EncoderBlock::register(store, seed, "fusion.span.block1", d);
        Affine::register(store, seed, "fusion.span.ff1", d, d);
        Affine::register(store, seed, "fusion.span.ff2", d, 2);
    }

    pub fn bind(b: &Bound, cfg: &ModelConfig) -> Self {
        SpanPredictor {
            blocks: [
                EncoderBlock::bind(b, "fusion.span.block0", cfg.attention_heads),
                EncoderBlock::bind(b, "fusion.span.block1", cfg.attention_heads),
            ],
            ff1: Affine::bind(b, "fusion.span.ff1"),
            ff2: Affine::bind(b, "fusion.span.ff2"),
        }
    }

    /// Returns `(P_s, P_e)`, each `[1, N_v]` and softmax-normalized.
    pub fn apply(&self, tape: &mut Tape, fused: Var) -> (Var, Var) {
        let mut z = fused;
        for block in &self.blocks {
            z = block.apply(tape, z);
        }
        let h = self.ff1.apply(tape, z);
        let h = tape.relu(h);
        let logits = self.ff2.apply(tape, h);

        let start = tape.slice_cols(logits, 0, 1);
        let start_t = tape.transpose(start);
        let p_s = tape.softmax_rows(start_t, None);
        let end = tape.slice_cols(logits, 1, 2);
        let end_t = tape.transpose(end);
        let p_e = tape.softmax_rows(end_t, None);
        (p_s, p_e)
    }
}

/// Constrained joint argmax of `P_s(s) * P_e(e)` over `s <= e`. Among
/// product ties the cell with the larger start probability wins, then the
/// larger end probability, then the smallest indices.
pub fn argmax_span(p_s: &[f64], p_e: &[f64]) -> (usize, usize) {
    assert_eq!(p_s.len(), p_e.len());
    assert!(!p_s.is_empty());
    let mut best = (0usize, 0usize);
    let mut best_key = (f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for s in 0..p_s.len() {
        for e in s..p_e.len() {
            let key = (p_s[s] * p_e[e], p_s[s], p_e[e]);
            if key.0 > best_key.0
                || (key.0 == best_key.0 && key.1 > best_key.1)
                || (key.0 == best_key.0 && key.1 == best_key.1 && key.2 > best_key.2)
            {
                best = (s, e);
                best_key = key;
            }
        }
    }
    best
}

/// Top-k cells of the constrained joint product, best first. `k >= 1`;
/// the first cell agrees with [`argmax_span`].
pub fn top_k_spans(p_s: &[f64], p_e: &[f64], k: usize) -> Vec<(usize, usize, f64)> {
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for s in 0..p_s.len() {
        for e in s..p_e.len() {
            cells.push((s, e, p_s[s] * p_e[e]));
        }
    }
    cells.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(p_s[b.0].partial_cmp(&p_s[a.0]).unwrap())
            .then(p_e[b.1].partial_cmp(&p_e[a.1]).unwrap())
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    cells.truncate(k);
    cells
}

/// Cross-entropy of both boundary distributions against one-hot
/// ground-truth indices.
pub fn span_loss(tape: &mut Tape, p_s: Var, p_e: Var, gt_start: usize, gt_end: usize) -> Result<Var> {
    let n = tape.value(p_s).ncols();
    for (name, idx) in [("start", gt_start), ("end", gt_end)] {
        if idx >= n {
            let _ = name;
            return Err(Error::IndexOutOfRange { index: idx, len: n });
        }
    }
    let ps = tape.elem(p_s, 0, gt_start);
    let pe = tape.elem(p_e, 0, gt_end);
    let ls = tape.ln(ps);
    let le = tape.ln(pe);
    let sum = tape.add(ls, le);
    Ok(tape.neg(sum))
}

/// Float head: two feed-forward layers per boundary reading the fused
/// feature at a coarse boundary frame, sigmoid-bounded into [0, 1].
pub struct FloatPredictor {
    pub start_l1: Affine,
    pub start_l2: Affine,
    pub end_l1: Affine,
    pub end_l2: Affine,
}

impl FloatPredictor {
    pub fn register(store: &mut ParamStore, seed: u64, cfg: &ModelConfig) {
        let d = cfg.feature_dim;
        Affine::register(store, seed, "fusion.float.start.l1", d, d);
        Affine::register(store, seed, "fusion.float.start.l2", d, 1);
        Affine::register(store, seed, "fusion.float.end.l1", d, d);
        Affine::register(store, seed, "fusion.float.end.l2", d, 1);
    }

    pub fn bind(b: &Bound) -> Self {
        FloatPredictor {
            start_l1: Affine::bind(b, "fusion.float.start.l1"),
            start_l2: Affine::bind(b, "fusion.float.start.l2"),
            end_l1: Affine::bind(b, "fusion.float.end.l1"),
            end_l2: Affine::bind(b, "fusion.float.end.l2"),
        }
    }

    /// Offsets at the given coarse bounds, each a `[1,1]` node in [0, 1].
    pub fn apply(&self, tape: &mut Tape, fused: Var, coarse_start: usize, coarse_end: usize) -> (Var, Var) {
        let fs = tape.row(fused, coarse_start);
        let h = self.start_l1.apply(tape, fs);
        let h = tape.relu(h);
        let h = self.start_l2.apply(tape, h);
        let o_s = tape.sigmoid(h);

        let fe = tape.row(fused, coarse_end);
        let h = self.end_l1.apply(tape, fe);
        let h = tape.relu(h);
        let h = self.end_l2.apply(tape, h);
        let o_e = tape.sigmoid(h);
        (o_s, o_e)
    }
}

/// Fine boundaries from coarse bounds and offsets:
/// `(t_s + 1 - O_s, t_e - 1 + O_e)`. A raw inversion collapses both ends
/// onto the midpoint, clamped into the coarse interval.
pub fn combine_boundaries(t_s: usize, t_e: usize, o_s: f64, o_e: f64) -> (f64, f64) {
    debug_assert!(t_s <= t_e && (0.0..=1.0).contains(&o_s) && (0.0..=1.0).contains(&o_e));
    let raw_s = t_s as f64 + 1.0 - o_s;
    let raw_e = t_e as f64 - 1.0 + o_e;
    if raw_s > raw_e {
        let m = ((raw_s + raw_e) / 2.0).clamp(t_s as f64, t_e as f64);
        (m, m)
    } else {
        (raw_s, raw_e)
    }
}

/// Differentiable twin of [`combine_boundaries`] for the float loss.
pub fn combine_boundaries_taped(
    tape: &mut Tape,
    t_s: usize,
    t_e: usize,
    o_s: Var,
    o_e: Var,
) -> (Var, Var) {
    let neg_os = tape.neg(o_s);
    let raw_s = tape.add_scalar(neg_os, t_s as f64 + 1.0);
    let raw_e = tape.add_scalar(o_e, t_e as f64 - 1.0);
    if tape.scalar_value(raw_s) > tape.scalar_value(raw_e) {
        let s = tape.add(raw_s, raw_e);
        let m = tape.scale(s, 0.5);
        let m = tape.clamp(m, t_s as f64, t_e as f64);
        (m, m)
    } else {
        (raw_s, raw_e)
    }
}

/// Smooth-L1 of the fine boundaries against float ground truth in frame
/// units.
pub fn float_loss(tape: &mut Tape, fine_s: Var, fine_e: Var, gt_s: f64, gt_e: f64) -> Var {
    let ls = tape.smooth_l1(fine_s, gt_s);
    let le = tape.smooth_l1(fine_e, gt_e);
    tape.add(ls, le)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn cfg4() -> ModelConfig {
        ModelConfig { feature_dim: 4, attention_heads: 2, ..Default::default() }
    }

    #[test]
    fn single_word_coattention_broadcasts_projection() {
        let cfg = cfg4();
        let mut store = ParamStore::new();
        CoAttention::register(&mut store, 1, &cfg);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let co = CoAttention::bind(&bound);
        let mut rng = crate::rng::stream_rng(1, "fusion-one-word");
        let v = tape.leaf(Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0)));
        let q = tape.leaf(Array2::from_shape_fn((1, 4), |_| rng.gen_range(-1.0..1.0)));

        // With one word the row softmax is 1 everywhere, so A is the
        // projected word at every frame.
        let projected = tape.matmul(q, co.w_s);
        let pt = tape.transpose(projected);
        let scores = tape.matmul(v, pt);
        let s_r = tape.softmax_rows(scores, None);
        let a = tape.matmul(s_r, projected);
        let av = tape.value(a).clone();
        let pv = tape.value(projected);
        for i in 0..3 {
            for k in 0..4 {
                assert!((av[[i, k]] - pv[[0, k]]).abs() < 1e-12);
            }
        }
        // and the full head runs shape-correct end to end
        let f = co.apply(&mut tape, v, q);
        assert_eq!(tape.value(f).dim(), (3, 4));
    }

    #[test]
    fn zero_recurrence_outputs_bias_broadcast() {
        let cfg = cfg4();
        let mut store = ParamStore::new();
        CoAttention::register(&mut store, 2, &cfg);
        for name in store.names().cloned().collect::<Vec<_>>() {
            if name.contains("gru") {
                let dim = store.get(&name).dim();
                *store.get_mut(&name) = Array2::zeros(dim);
            }
        }
        *store.get_mut("fusion.out.b") = array![[0.5, -1.0, 2.0, 0.25]];
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let co = CoAttention::bind(&bound);
        let mut rng = crate::rng::stream_rng(2, "fusion-zero");
        let v = tape.leaf(Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0)));
        let q = tape.leaf(Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0)));
        let f = co.apply(&mut tape, v, q);
        let fv = tape.value(f);
        for i in 0..3 {
            assert_eq!(fv[[i, 0]], 0.5);
            assert_eq!(fv[[i, 1]], -1.0);
            assert_eq!(fv[[i, 2]], 2.0);
            assert_eq!(fv[[i, 3]], 0.25);
        }
    }

    #[test]
    fn rince_single_entry_closed_form() {
        let mut tape = Tape::new();
        let s_val = 0.37;
        let (tau_v, alpha_v) = (0.5, 0.5);
        let s = tape.leaf(array![[s_val]]);
        let tau = tape.scalar(tau_v);
        let alpha = tape.scalar(alpha_v);
        let l = rince_loss(&mut tape, s, RinceDirection::RowWise, tau, alpha).unwrap();
        let expect = -s_val.exp() / tau_v + (alpha_v * s_val.exp()).powf(tau_v) / tau_v;
        assert!((tape.scalar_value(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn rince_rejects_non_square() {
        let mut tape = Tape::new();
        let s = tape.leaf(Array2::zeros((2, 3)));
        let tau = tape.scalar(0.5);
        let alpha = tape.scalar(0.5);
        match rince_loss(&mut tape, s, RinceDirection::RowWise, tau, alpha) {
            Err(Error::NonSquare { rows: 2, cols: 3 }) => {}
            other => panic!("expected NonSquare, got {other:?}"),
        }
    }

    #[test]
    fn rince_gradient_signs() {
        let mut rng = crate::rng::stream_rng(3, "rince-signs");
        for direction in [RinceDirection::RowWise, RinceDirection::ColumnWise] {
            for _ in 0..10 {
                let b = 3;
                let base = Array2::from_shape_fn((b, b), |_| rng.gen_range(-1.0..1.0));
                let eval = |m: &Array2<f64>| {
                    let mut tape = Tape::new();
                    let s = tape.leaf(m.clone());
                    let tau = tape.scalar(0.5);
                    let alpha = tape.scalar(0.5);
                    let l = rince_loss(&mut tape, s, direction, tau, alpha).unwrap();
                    tape.scalar_value(l)
                };
                let eps = 1e-6;
                // diagonal: loss rewards similarity
                let mut plus = base.clone();
                plus[[1, 1]] += eps;
                let mut minus = base.clone();
                minus[[1, 1]] -= eps;
                assert!((eval(&plus) - eval(&minus)) / (2.0 * eps) < 0.0);
                // off-diagonal: loss penalizes similarity
                let mut plus = base.clone();
                plus[[0, 2]] += eps;
                let mut minus = base.clone();
                minus[[0, 2]] -= eps;
                assert!((eval(&plus) - eval(&minus)) / (2.0 * eps) > 0.0);
            }
        }
    }

    #[test]
    fn span_argmax_examples() {
        assert_eq!(argmax_span(&[0.7, 0.2, 0.1], &[0.1, 0.2, 0.7]), (0, 2));
        // all feasible products are zero; the larger start probability wins
        assert_eq!(argmax_span(&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]), (2, 2));
        // uniform ties fall to the smallest indices
        let u = [0.25; 4];
        assert_eq!(argmax_span(&u, &u), (0, 0));
    }

    #[test]
    fn span_argmax_matches_exhaustive_search() {
        let mut rng = crate::rng::stream_rng(4, "span-oracle");
        for _ in 0..200 {
            let n = rng.gen_range(1..16);
            let mut ps: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let mut pe: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let zs: f64 = ps.iter().sum();
            let ze: f64 = pe.iter().sum();
            ps.iter_mut().for_each(|v| *v /= zs);
            pe.iter_mut().for_each(|v| *v /= ze);

            let got = argmax_span(&ps, &pe);
            let mut best = (0, 0);
            let mut best_p = f64::NEG_INFINITY;
            for s in 0..n {
                for e in s..n {
                    if ps[s] * pe[e] > best_p {
                        best_p = ps[s] * pe[e];
                        best = (s, e);
                    }
                }
            }
            assert_eq!(got, best);
        }
    }

    #[test]
    fn top_k_is_sorted_and_headed_by_argmax() {
        let ps = [0.5, 0.3, 0.2];
        let pe = [0.1, 0.3, 0.6];
        let top = top_k_spans(&ps, &pe, 5);
        assert_eq!((top[0].0, top[0].1), argmax_span(&ps, &pe));
        for w in top.windows(2) {
            assert!(w[0].2 >= w[1].2);
        }
    }

    #[test]
    fn span_loss_values() {
        let mut tape = Tape::new();
        // delta masses on the truth: zero loss
        let p_s = tape.leaf(array![[1.0, 0.0, 0.0, 0.0]]);
        let p_e = tape.leaf(array![[0.0, 0.0, 0.0, 1.0]]);
        let l = span_loss(&mut tape, p_s, p_e, 0, 3).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);

        // uniform over 4 frames: 2 ln 4
        let u = tape.leaf(Array2::from_elem((1, 4), 0.25));
        let l = span_loss(&mut tape, u, u, 1, 2).unwrap();
        assert!((tape.scalar_value(l) - 2.0 * 4.0f64.ln()).abs() < 1e-12);

        match span_loss(&mut tape, u, u, 1, 4) {
            Err(Error::IndexOutOfRange { index: 4, len: 4 }) => {}
            other => panic!("expected IndexOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn span_loss_nonnegative_on_random_inputs() {
        let mut rng = crate::rng::stream_rng(5, "span-nonneg");
        for _ in 0..100 {
            let n = rng.gen_range(2..8);
            let mut tape = Tape::new();
            let logits = tape.leaf(Array2::from_shape_fn((1, n), |_| rng.gen_range(-3.0..3.0)));
            let p = tape.softmax_rows(logits, None);
            let l = span_loss(&mut tape, p, p, rng.gen_range(0..n), rng.gen_range(0..n)).unwrap();
            assert!(tape.scalar_value(l) >= 0.0);
        }
    }

    #[test]
    fn combine_boundary_examples() {
        assert_eq!(combine_boundaries(3, 7, 0.25, 0.5), (3.75, 6.5));
        assert_eq!(combine_boundaries(3, 7, 1.0, 1.0), (3.0, 7.0));
        assert_eq!(combine_boundaries(2, 2, 0.0, 0.0), (2.0, 2.0));
    }

    #[test]
    fn combine_is_monotone_in_offsets() {
        let mut rng = crate::rng::stream_rng(6, "combine-mono");
        for _ in 0..500 {
            let t_s = rng.gen_range(0..6);
            let t_e = t_s + rng.gen_range(0..6);
            let o_s: f64 = rng.gen_range(0.0..1.0);
            let o_e: f64 = rng.gen_range(0.0..1.0);
            let d: f64 = rng.gen_range(0.0..0.3);
            let (s0, e0) = combine_boundaries(t_s, t_e, o_s, o_e);
            let (_, e1) = combine_boundaries(t_s, t_e, o_s, (o_e + d).min(1.0));
            assert!(e1 >= e0 - 1e-12, "t_e must not decrease when O_e grows");
            let (s2, _) = combine_boundaries(t_s, t_e, (o_s + d).min(1.0), o_e);
            assert!(s2 <= s0 + 1e-12, "t_s must not increase when O_s grows");
            assert!(s0 <= e0 + 1e-12, "combined boundaries stay ordered");
        }
    }

    #[test]
    fn taped_combine_matches_pure() {
        let mut rng = crate::rng::stream_rng(7, "combine-taped");
        for _ in 0..100 {
            let t_s = rng.gen_range(0..5);
            let t_e = t_s + rng.gen_range(0..5);
            let o_s: f64 = rng.gen_range(0.0..1.0);
            let o_e: f64 = rng.gen_range(0.0..1.0);
            let (ps, pe) = combine_boundaries(t_s, t_e, o_s, o_e);
            let mut tape = Tape::new();
            let ov_s = tape.scalar(o_s);
            let ov_e = tape.scalar(o_e);
            let (ts, te) = combine_boundaries_taped(&mut tape, t_s, t_e, ov_s, ov_e);
            assert!((tape.scalar_value(ts) - ps).abs() < 1e-12);
            assert!((tape.scalar_value(te) - pe).abs() < 1e-12);
        }
    }

    #[test]
    fn float_offsets_are_sigmoid_bounded() {
        let cfg = cfg4();
        let mut store = ParamStore::new();
        FloatPredictor::register(&mut store, 8, &cfg);
        let mut rng = crate::rng::stream_rng(8, "float-bounds");
        for _ in 0..20 {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let fp = FloatPredictor::bind(&bound);
            let f = tape.leaf(Array2::from_shape_fn((4, 4), |_| rng.gen_range(-10.0..10.0)));
            let (o_s, o_e) = fp.apply(&mut tape, f, 1, 3);
            for o in [o_s, o_e] {
                let v = tape.scalar_value(o);
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn float_loss_piecewise_values() {
        let mut tape = Tape::new();
        let s = tape.scalar(2.0);
        let e = tape.scalar(5.0);
        let l = float_loss(&mut tape, s, e, 2.0, 5.0);
        assert_eq!(tape.scalar_value(l), 0.0);
        let l = float_loss(&mut tape, s, e, 3.0, 5.0);
        assert!((tape.scalar_value(l) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn span_probabilities_normalize() {
        let cfg = cfg4();
        let mut store = ParamStore::new();
        SpanPredictor::register(&mut store, 9, &cfg);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let sp = SpanPredictor::bind(&bound, &cfg);
        let mut rng = crate::rng::stream_rng(9, "span-norm");
        let f = tape.leaf(Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0)));
        let (p_s, p_e) = sp.apply(&mut tape, f);
        for p in [p_s, p_e] {
            let sum: f64 = tape.value(p).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert_eq!(tape.value(p).dim(), (1, 5));
        }
    }
}
