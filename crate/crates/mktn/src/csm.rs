//! Cross-sentence semantic mining: query-to-query relationship modeling.
//!
//! Query-level vectors are position-embedded by rank (start-time order
//! within a video, manifest order across videos), self-attend across the
//! batch, cross-attend into their own pair's multi-modal memory, and a
//! two-layer regressor emits per-query start/end timestamps in frame
//! units. The memory of query j is `[frame globals; word rows; sentence]`
//! so the decoder sees both word- and sentence-granularity text.

use ndarray::Array2;

use crate::config::ModelConfig;
use crate::nn::{Affine, Bound, MultiHeadAttention, ParamStore};
use crate::tape::{Tape, Var};

/// Sinusoid table row for one rank: `sin(rank / 10000^(2i/d))` on even
/// columns, `cos` of the same angle on odd ones.
pub fn position_encoding(rank: usize, d: usize) -> Vec<f64> {
    let mut row = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = rank as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        row[2 * i] = angle.sin();
        row[2 * i + 1] = angle.cos();
    }
    if d % 2 == 1 {
        let i = d / 2;
        row[d - 1] = (rank as f64 / 10000f64.powf(2.0 * i as f64 / d as f64)).sin();
    }
    row
}

/// Add the rank-indexed sinusoid to each query row.
pub fn position_embed(tape: &mut Tape, queries: Var, ranks: &[usize]) -> Var {
    let (m, d) = tape.value(queries).dim();
    assert_eq!(m, ranks.len(), "one rank per query row");
    let mut table = Array2::zeros((m, d));
    for (j, &rank) in ranks.iter().enumerate() {
        let row = position_encoding(rank, d);
        for (k, v) in row.into_iter().enumerate() {
            table[[j, k]] = v;
        }
    }
    let pe = tape.leaf(table);
    tape.add(queries, pe)
}

pub struct CsmDecoder {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub reg_hidden: Affine,
    pub reg_out: Affine,
}

impl CsmDecoder {
    pub fn register(store: &mut ParamStore, seed: u64, cfg: &ModelConfig) {
        let d = cfg.feature_dim;
        MultiHeadAttention::register(store, seed, "csm.self_attn", d);
        MultiHeadAttention::register(store, seed, "csm.cross_attn", d);
        Affine::register(store, seed, "csm.reg.hidden", d, d);
        Affine::register(store, seed, "csm.reg.out", d, 2);
    }

    pub fn bind(b: &Bound, cfg: &ModelConfig) -> Self {
        CsmDecoder {
            self_attn: MultiHeadAttention::bind(b, "csm.self_attn", cfg.attention_heads, true),
            cross_attn: MultiHeadAttention::bind(b, "csm.cross_attn", cfg.attention_heads, true),
            reg_hidden: Affine::bind(b, "csm.reg.hidden"),
            reg_out: Affine::bind(b, "csm.reg.out"),
        }
    }

    /// `queries`: `[M_q, d]` query-level features. `memories[j]`: the rows
    /// query j may attend (its own pair only). Returns `[M_q, 2]`
    /// timestamps.
    pub fn decode(&self, tape: &mut Tape, queries: Var, ranks: &[usize], memories: &[Var]) -> Var {
        let m = tape.value(queries).nrows();
        assert_eq!(m, memories.len(), "one memory per query");

        let embedded = position_embed(tape, queries, ranks);
        let attended = self.self_attn.apply(tape, embedded, embedded, None);
        let s = tape.add(embedded, attended);
        let mixed = tape.scale(s, 0.5);

        let mut rows = Vec::with_capacity(m);
        for (j, &memory) in memories.iter().enumerate() {
            let row = tape.row(mixed, j);
            let cross = self.cross_attn.apply(tape, row, memory, None);
            let s = tape.add(row, cross);
            rows.push(tape.scale(s, 0.5));
        }
        let stacked = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows) };

        let h = self.reg_hidden.apply(tape, stacked);
        let h = tape.relu(h);
        self.reg_out.apply(tape, h)
    }
}

/// Smooth-L1 on both boundaries, averaged over queries:
/// `(1/M_q) * sum_j [sl1(pred_s - gt_s) + sl1(pred_e - gt_e)]`.
pub fn csm_loss(tape: &mut Tape, pred: Var, ground_truth: &[(f64, f64)]) -> Var {
    let m = ground_truth.len();
    assert_eq!(tape.value(pred).dim(), (m, 2), "prediction shape mismatch");
    let mut total = tape.scalar(0.0);
    for (j, &(gs, ge)) in ground_truth.iter().enumerate() {
        let ps = tape.elem(pred, j, 0);
        let pe = tape.elem(pred, j, 1);
        let ls = tape.smooth_l1(ps, gs);
        let le = tape.smooth_l1(pe, ge);
        let l = tape.add(ls, le);
        total = tape.add(total, l);
    }
    tape.scale(total, 1.0 / m as f64)
}
