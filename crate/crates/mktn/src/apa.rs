//! Activity-sentence prototype alignment.
//!
//! A masked frame decoder aggregates each frame's object prototypes into
//! one frame prototype (the block-diagonal mask makes the locality exact),
//! an unmasked activity decoder mixes frame prototypes into activity
//! prototypes, and the alignment score is the best cosine between the
//! sentence vector and any activity prototype.

use ndarray::Array2;

use crate::config::ModelConfig;
use crate::nn::{Affine, Bound, ParamStore};
use crate::tape::{Tape, Var};

/// `[N_v, N_v*N_a]` additive mask: row i is 0 on columns
/// `[N_a*i, N_a*(i+1))` and -inf elsewhere.
pub fn build_frame_mask(n_v: usize, n_a: usize) -> Array2<f64> {
    assert!(n_v >= 1 && n_a >= 1);
    let mut mask = Array2::from_elem((n_v, n_v * n_a), f64::NEG_INFINITY);
    for i in 0..n_v {
        for j in n_a * i..n_a * (i + 1) {
            mask[[i, j]] = 0.0;
        }
    }
    mask
}

/// Frame decoder: `P_f = Q_f + softmax(Q_f C_a^T + mask) V_a`, then the
/// averaged residual with the frame's global feature,
/// `(P_f + v_C) / 2`. Logits follow the printed form (no scaling).
pub struct FrameDecoder {
    pub key: Affine,
    pub value: Affine,
}

impl FrameDecoder {
    pub fn register(store: &mut ParamStore, seed: u64, d: usize) {
        Affine::register(store, seed, "apa.frame.key", d, d);
        Affine::register(store, seed, "apa.frame.value", d, d);
    }

    pub fn bind(b: &Bound) -> Self {
        FrameDecoder { key: Affine::bind(b, "apa.frame.key"), value: Affine::bind(b, "apa.frame.value") }
    }

    /// `frame_queries`: `[N_v, d]` learnable; `prototypes_flat`:
    /// `[N_v*N_a, d]` object prototypes in frame-major order;
    /// `frame_globals`: `[N_v, d]`.
    pub fn apply(
        &self,
        tape: &mut Tape,
        frame_queries: Var,
        prototypes_flat: Var,
        mask: &Array2<f64>,
        frame_globals: Var,
    ) -> Var {
        let keys = self.key.apply(tape, prototypes_flat);
        let values = self.value.apply(tape, prototypes_flat);
        let kt = tape.transpose(keys);
        let logits = tape.matmul(frame_queries, kt);
        assert_eq!(tape.value(logits).dim(), mask.dim(), "mask shape mismatch");
        let attn = tape.softmax_rows(logits, Some(mask.clone()));
        let mixed = tape.matmul(attn, values);
        let p_f = tape.add(frame_queries, mixed);
        let s = tape.add(p_f, frame_globals);
        tape.scale(s, 0.5)
    }
}

/// Activity decoder: `P_e = Q_e + softmax(Q_e K_f^T) V_f` over the frame
/// prototypes.
pub struct ActivityDecoder {
    pub key: Affine,
    pub value: Affine,
}

impl ActivityDecoder {
    pub fn register(store: &mut ParamStore, seed: u64, d: usize) {
        Affine::register(store, seed, "apa.activity.key", d, d);
        Affine::register(store, seed, "apa.activity.value", d, d);
    }

    pub fn bind(b: &Bound) -> Self {
        ActivityDecoder { key: Affine::bind(b, "apa.activity.key"), value: Affine::bind(b, "apa.activity.value") }
    }

    pub fn apply(&self, tape: &mut Tape, activity_queries: Var, frame_prototypes: Var) -> Var {
        let keys = self.key.apply(tape, frame_prototypes);
        let values = self.value.apply(tape, frame_prototypes);
        let kt = tape.transpose(keys);
        let logits = tape.matmul(activity_queries, kt);
        let attn = tape.softmax_rows(logits, None);
        let mixed = tape.matmul(attn, values);
        tape.add(activity_queries, mixed)
    }
}

/// Best cosine between the sentence vector and any activity prototype.
/// Ties break to the lowest prototype index for the subgradient.
pub fn activity_sentence_similarity(tape: &mut Tape, sentence: Var, activity_prototypes: Var) -> Var {
    let s_norm = tape.l2_normalize_rows(sentence);
    let p_norm = tape.l2_normalize_rows(activity_prototypes);
    let st = tape.transpose(s_norm);
    let dots = tape.matmul(p_norm, st);
    tape.max_all(dots)
}

/// Registers decoder weights plus the learnable frame / activity query
/// banks.
pub fn register(store: &mut ParamStore, seed: u64, cfg: &ModelConfig) {
    let d = cfg.feature_dim;
    FrameDecoder::register(store, seed, d);
    ActivityDecoder::register(store, seed, d);
    let std = 1.0 / (d as f64).sqrt();
    store.add_gaussian(seed, "apa.frame_queries", cfg.frames_per_video, d, std);
    store.add_gaussian(seed, "apa.activity_queries", cfg.activity_prototypes, d, std);
}

pub struct ApaParams {
    pub frame_decoder: FrameDecoder,
    pub activity_decoder: ActivityDecoder,
    pub frame_queries: Var,
    pub activity_queries: Var,
}

pub fn bind(b: &Bound) -> ApaParams {
    ApaParams {
        frame_decoder: FrameDecoder::bind(b),
        activity_decoder: ActivityDecoder::bind(b),
        frame_queries: b.var("apa.frame_queries"),
        activity_queries: b.var("apa.activity_queries"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn mask_single_frame_is_all_zero_row() {
        let m = build_frame_mask(1, 3);
        assert_eq!(m.dim(), (1, 3));
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_two_frames_two_prototypes() {
        let m = build_frame_mask(2, 2);
        let inf = f64::NEG_INFINITY;
        assert_eq!(m, array![[0.0, 0.0, inf, inf], [inf, inf, 0.0, 0.0]]);
    }

    #[test]
    fn mask_rows_have_exactly_na_zeros() {
        let mut rng = crate::rng::stream_rng(1, "apa-mask");
        for _ in 0..20 {
            let n_v = rng.gen_range(1..6);
            let n_a = rng.gen_range(1..5);
            let m = build_frame_mask(n_v, n_a);
            for i in 0..n_v {
                let zeros = m.row(i).iter().filter(|&&v| v == 0.0).count();
                assert_eq!(zeros, n_a);
            }
        }
    }

    fn decoder_store(seed: u64, d: usize) -> ParamStore {
        let mut store = ParamStore::new();
        FrameDecoder::register(&mut store, seed, d);
        ActivityDecoder::register(&mut store, seed, d);
        store
    }

    #[test]
    fn identical_prototypes_with_identity_value_pass_through() {
        let mut store = decoder_store(0, 3);
        *store.get_mut("apa.frame.value.w") = Array2::eye(3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let dec = FrameDecoder::bind(&bound);
        let u = [0.4, -0.2, 0.9];
        let protos = tape.leaf(array![[u[0], u[1], u[2]], [u[0], u[1], u[2]]]);
        let q = tape.zeros(1, 3);
        let v_c = tape.leaf(array![[u[0], u[1], u[2]]]);
        let mask = build_frame_mask(1, 2);
        let out = dec.apply(&mut tape, q, protos, &mask, v_c);
        let v = tape.value(out);
        for k in 0..3 {
            assert!((v[[0, k]] - u[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_prototype_gets_weight_one_regardless_of_scores() {
        let store = decoder_store(1, 3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let dec = FrameDecoder::bind(&bound);
        // N_v=2, N_a=1: each frame sees exactly one prototype
        let protos = tape.leaf(array![[5.0, -3.0, 2.0], [0.1, 0.2, 0.3]]);
        let q = tape.leaf(array![[1.0, 1.0, 1.0], [-2.0, 0.5, 0.0]]);
        let globals = tape.leaf(array![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        let mask = build_frame_mask(2, 1);
        let out = dec.apply(&mut tape, q, protos, &mask, globals);

        // expected: (q_i + value(proto_i) + v_C_i) / 2 entrywise
        let values = {
            let w = store.get("apa.frame.value.w");
            tape.value(protos).dot(w)
        };
        let v = tape.value(out);
        for i in 0..2 {
            for k in 0..3 {
                let expect =
                    (tape.value(q)[[i, k]] + values[[i, k]] + tape.value(globals)[[i, k]]) / 2.0;
                assert!((v[[i, k]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_attention_is_strictly_local() {
        let store = decoder_store(2, 4);
        let mut rng = crate::rng::stream_rng(2, "apa-local");
        let n_v = 3;
        let n_a = 2;
        let protos = Array2::from_shape_fn((n_v * n_a, 4), |_| rng.gen_range(-1.0..1.0));
        let queries = Array2::from_shape_fn((n_v, 4), |_| rng.gen_range(-1.0..1.0));
        let globals = Array2::from_shape_fn((n_v, 4), |_| rng.gen_range(-1.0..1.0));
        let mask = build_frame_mask(n_v, n_a);

        let run = |protos: &Array2<f64>| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let dec = FrameDecoder::bind(&bound);
            let p = tape.leaf(protos.clone());
            let q = tape.leaf(queries.clone());
            let g = tape.leaf(globals.clone());
            let out = dec.apply(&mut tape, q, p, &mask, g);
            tape.value(out).clone()
        };
        let base = run(&protos);
        // scribble over frame 2's prototypes; frames 0 and 1 must not move
        let mut poked = protos.clone();
        for j in 4..6 {
            for k in 0..4 {
                poked[[j, k]] = rng.gen_range(-100.0..100.0);
            }
        }
        let out = run(&poked);
        for i in 0..2 {
            for k in 0..4 {
                assert_eq!(base[[i, k]], out[[i, k]], "frame {i} leaked");
            }
        }
    }

    #[test]
    fn activity_decoder_residual_structure() {
        let mut store = decoder_store(3, 3);
        *store.get_mut("apa.activity.value.w") = Array2::eye(3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let dec = ActivityDecoder::bind(&bound);
        // all frame prototypes equal u -> every activity prototype = query + u
        let u = [0.7, -0.1, 0.4];
        let p_f = tape.leaf(array![[u[0], u[1], u[2]], [u[0], u[1], u[2]]]);
        let q = tape.leaf(array![[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]]);
        let out = dec.apply(&mut tape, q, p_f);
        let v = tape.value(out);
        for i in 0..2 {
            for k in 0..3 {
                assert!((v[[i, k]] - (tape.value(q)[[i, k]] + u[k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_extremes_and_bounds() {
        let mut tape = Tape::new();
        let q = tape.leaf(array![[0.6, 0.8]]);
        let protos = tape.leaf(array![[0.0, 1.0], [0.6, 0.8]]);
        let s = activity_sentence_similarity(&mut tape, q, protos);
        assert!((tape.scalar_value(s) - 1.0).abs() < 1e-9);

        let orth = tape.leaf(array![[-0.8, 0.6], [0.8, -0.6]]);
        let s = activity_sentence_similarity(&mut tape, q, orth);
        assert!(tape.scalar_value(s).abs() < 1e-9);
    }

    #[test]
    fn similarity_is_max_of_cosines_and_permutation_invariant() {
        let mut rng = crate::rng::stream_rng(4, "apa-sim");
        let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let protos = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));

        let eval = |p: &Array2<f64>| {
            let mut tape = Tape::new();
            let qv = tape.leaf(Array2::from_shape_vec((1, 3), q.clone()).unwrap());
            let pv = tape.leaf(p.clone());
            let s = activity_sentence_similarity(&mut tape, qv, pv);
            tape.scalar_value(s)
        };
        let got = eval(&protos);

        let qn = {
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            q.iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let mut best = f64::NEG_INFINITY;
        for i in 0..3 {
            let row = protos.row(i);
            let n = row.dot(&row).sqrt();
            let cos: f64 = (0..3).map(|k| row[k] / n * qn[k]).sum();
            best = best.max(cos);
        }
        assert!((got - best).abs() < 1e-9);

        let mut perm = protos.clone();
        perm.row_mut(0).assign(&protos.row(2));
        perm.row_mut(2).assign(&protos.row(0));
        assert!((eval(&perm) - got).abs() < 1e-12);
    }
}
