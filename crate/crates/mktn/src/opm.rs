//! Object-phrase prototype matching: sparse aggregation of patches into
//! appearance prototypes and words into phrase prototypes, scored by a
//! max-max-mean similarity.

use crate::config::ModelConfig;
use crate::nn::{Affine, Bound, ParamStore};
use crate::tape::{Tape, Var};

/// Three FC layers with a ReLU after each, so the predicted aggregation
/// weights are nonnegative; columns are then rescaled to sum 1 (all-zero
/// columns stay zero and yield zero prototypes).
pub struct SparsePredictor {
    pub l1: Affine,
    pub l2: Affine,
    pub l3: Affine,
}

impl SparsePredictor {
    pub fn register(store: &mut ParamStore, seed: u64, prefix: &str, d: usize, k_out: usize) {
        Affine::register(store, seed, &format!("{prefix}.l1"), d, d);
        Affine::register(store, seed, &format!("{prefix}.l2"), d, d);
        Affine::register(store, seed, &format!("{prefix}.l3"), d, k_out);
    }

    pub fn bind(b: &Bound, prefix: &str) -> Self {
        SparsePredictor {
            l1: Affine::bind(b, &format!("{prefix}.l1")),
            l2: Affine::bind(b, &format!("{prefix}.l2")),
            l3: Affine::bind(b, &format!("{prefix}.l3")),
        }
    }

    /// `[K_in, d] -> [K_in, K_out]` nonnegative, column-renormalized.
    pub fn weights(&self, tape: &mut Tape, rows: Var) -> Var {
        let h = self.l1.apply(tape, rows);
        let h = tape.relu(h);
        let h = self.l2.apply(tape, h);
        let h = tape.relu(h);
        let h = self.l3.apply(tape, h);
        let h = tape.relu(h);
        tape.col_renormalize(h)
    }
}

/// Aggregate input rows with the predicted weights: `W^T rows`,
/// `[K_out, d]`. Serves both appearance (patch rows) and phrase (word
/// rows) prototypes.
pub fn aggregate_prototypes(tape: &mut Tape, weights: Var, rows: Var) -> Var {
    let wt = tape.transpose(weights);
    tape.matmul(wt, rows)
}

/// Max-max-mean object-phrase similarity: unit-normalize everything, take
/// for each object prototype slot the best dot product over all frames and
/// phrase prototypes, and average over slots. In [-1, 1].
pub fn object_phrase_similarity(tape: &mut Tape, appearance_per_frame: &[Var], phrases: Var) -> Var {
    assert!(!appearance_per_frame.is_empty());
    let n_a = tape.value(appearance_per_frame[0]).nrows();
    let p_norm = tape.l2_normalize_rows(phrases);
    let p_t = tape.transpose(p_norm);

    // per-frame [N_a, N_p] dot-product tables
    let tables: Vec<Var> = appearance_per_frame
        .iter()
        .map(|&p_a| {
            let a_norm = tape.l2_normalize_rows(p_a);
            tape.matmul(a_norm, p_t)
        })
        .collect();

    let mut per_slot = Vec::with_capacity(n_a);
    for l in 0..n_a {
        let slot_rows: Vec<Var> = tables.iter().map(|&t| tape.row(t, l)).collect();
        let stacked = if slot_rows.len() == 1 { slot_rows[0] } else { tape.concat_rows(&slot_rows) };
        per_slot.push(tape.max_all(stacked));
    }
    let all = tape.stack_scalars(&per_slot, n_a, 1);
    tape.mean_all(all)
}

/// Registers both sparse predictors of the module.
pub fn register(store: &mut ParamStore, seed: u64, cfg: &ModelConfig) {
    SparsePredictor::register(store, seed, "opm.visual", cfg.feature_dim, cfg.appearance_prototypes);
    SparsePredictor::register(store, seed, "opm.textual", cfg.feature_dim, cfg.phrase_prototypes);
}

pub struct OpmParams {
    pub visual: SparsePredictor,
    pub textual: SparsePredictor,
}

pub fn bind(b: &Bound) -> OpmParams {
    OpmParams { visual: SparsePredictor::bind(b, "opm.visual"), textual: SparsePredictor::bind(b, "opm.textual") }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::Rng;

    fn predictor(seed: u64, d: usize, k: usize) -> (ParamStore, String) {
        let mut store = ParamStore::new();
        SparsePredictor::register(&mut store, seed, "p", d, k);
        (store, "p".to_string())
    }

    #[test]
    fn zero_parameters_give_zero_weights_and_prototypes() {
        let (mut store, prefix) = predictor(0, 3, 2);
        for name in ["p.l1.w", "p.l2.w"] {
            *store.get_mut(name) = Array2::zeros((3, 3));
        }
        *store.get_mut("p.l3.w") = Array2::zeros((3, 2));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let pred = SparsePredictor::bind(&bound, &prefix);
        let rows = tape.leaf(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let w = pred.weights(&mut tape, rows);
        assert!(tape.value(w).iter().all(|&v| v == 0.0));
        let proto = aggregate_prototypes(&mut tape, w, rows);
        assert!(tape.value(proto).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_column_selects_a_single_row() {
        let mut tape = Tape::new();
        let w = tape.leaf(array![[0.0, 0.0], [0.0, 3.0], [0.0, 0.0]]);
        let w = tape.col_renormalize(w);
        let rows = tape.leaf(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let proto = aggregate_prototypes(&mut tape, w, rows);
        let v = tape.value(proto);
        // column 1 selects row 1 exactly; column 0 is all   zero
        assert_eq!(v[[1, 0]], 3.0);
        assert_eq!(v[[1, 1]], 4.0);
        assert_eq!(v[[0, 0]], 0.0);
    }

    #[test]
    fn uniform_weights_average_the_rows() {
        let mut tape = Tape::new();
        let w = tape.leaf(Array2::from_elem((3, 2), 1.0));
        let w = tape.col_renormalize(w);
        let rows = tape.leaf(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let proto = aggregate_prototypes(&mut tape, w, rows);
        let v = tape.value(proto);
        for k in 0..2 {
            assert!((v[[k, 0]] - 3.0).abs() < 1e-12);
            assert!((v[[k, 1]] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn predictor_matches_scalar_affine_relu_oracle() {
        let (store, prefix) = predictor(3, 2, 2);
        let mut rng = crate::rng::stream_rng(3, "opm-oracle");
        let rows = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let pred = SparsePredictor::bind(&bound, &prefix);
        let rv = tape.leaf(rows.clone());
        let got = pred.weights(&mut tape, rv);

        // scalar-loop oracle
        let affine = |x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>| {
            let mut out = Array2::zeros((x.nrows(), w.ncols()));
            for i in 0..x.nrows() {
                for j in 0..w.ncols() {
                    let mut acc = b[[0, j]];
                    for k in 0..x.ncols() {
                        acc += x[[i, k]] * w[[k, j]];
                    }
                    out[[i, j]] = acc.max(0.0);
                }
            }
            out
        };
        let h = affine(&rows, store.get("p.l1.w"), store.get("p.l1.b"));
        let h = affine(&h, store.get("p.l2.w"), store.get("p.l2.b"));
        let mut h = affine(&h, store.get("p.l3.w"), store.get("p.l3.b"));
        for j in 0..h.ncols() {
            let s: f64 = h.column(j).sum();
            if s > 0.0 {
                h.column_mut(j).mapv_inplace(|v| v / s);
            }
        }
        for (a, b) in tape.value(got).iter().zip(h.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_degenerate_cases() {
        let mut tape = Tape::new();
        let u = tape.leaf(array![[0.6, 0.8]]);
        let s = object_phrase_similarity(&mut tape, &[u], u);
        assert!((tape.scalar_value(s) - 1.0).abs() < 1e-9);

        let a = tape.leaf(array![[1.0, 0.0]]);
        let b = tape.leaf(array![[0.0, 1.0]]);
        let s = object_phrase_similarity(&mut tape, &[a], b);
        assert!(tape.scalar_value(s).abs() < 1e-9);
    }

    #[test]
    fn similarity_matches_exhaustive_max_max_mean() {
        let mut rng = crate::rng::stream_rng(5, "opm-sim");
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let mut m = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
            for mut row in m.rows_mut() {
                let n: f64 = row.dot(&row);
                let n = n.sqrt();
                row.mapv_inplace(|v| v / n);
            }
            m
        };
        let frames = [mk(&mut rng), mk(&mut rng)];
        let phrases = mk(&mut rng);

        let mut tape = Tape::new();
        let frame_vars: Vec<Var> = frames.iter().map(|f| tape.leaf(f.clone())).collect();
        let pv = tape.leaf(phrases.clone());
        let got = object_phrase_similarity(&mut tape, &frame_vars, pv);

        let mut total = 0.0;
        for l in 0..2 {
            let mut best = f64::NEG_INFINITY;
            for frame in &frames {
                for j in 0..2 {
                    let dot: f64 = (0..3).map(|k| frame[[l, k]] * phrases[[j, k]]).sum();
                    best = best.max(dot);
                }
            }
            total += best;
        }
        assert!((tape.scalar_value(got) - total / 2.0).abs() < 1e-9);
    }

    #[test]
    fn similarity_invariant_under_permutations() {
        let mut rng = crate::rng::stream_rng(6, "opm-perm");
        let f0 = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let f1 = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let p = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0));

        let eval = |frames: &[Array2<f64>], phrases: &Array2<f64>| {
            let mut tape = Tape::new();
            let fv: Vec<Var> = frames.iter().map(|f| tape.leaf(f.clone())).collect();
            let pv = tape.leaf(phrases.clone());
            let s = object_phrase_similarity(&mut tape, &fv, pv);
            tape.scalar_value(s)
        };

        let base = eval(&[f0.clone(), f1.clone()], &p);
        // permute frames
        assert!((eval(&[f1.clone(), f0.clone()], &p) - base).abs() < 1e-12);
        // permute phrase prototypes
        let mut p_swapped = p.clone();
        p_swapped.row_mut(0).assign(&p.row(1));
        p_swapped.row_mut(1).assign(&p.row(0));
        assert!((eval(&[f0.clone(), f1.clone()], &p_swapped) - base).abs() < 1e-12);
        // object-slot permutation must permute consistently across frames
        let swap_rows = |m: &Array2<f64>| {
            let mut out = m.clone();
            out.row_mut(0).assign(&m.row(2));
            out.row_mut(2).assign(&m.row(0));
            out
        };
        assert!((eval(&[swap_rows(&f0), swap_rows(&f1)], &p) - base).abs() < 1e-12);
    }

    #[test]
    fn similarity_bounded_for_unit_inputs() {
        let mut rng = crate::rng::stream_rng(7, "opm-bound");
        for _ in 0..50 {
            let f = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-2.0..2.0));
            let p = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-2.0..2.0));
            let mut tape = Tape::new();
            let fv = tape.leaf(f);
            let pv = tape.leaf(p);
            let s = object_phrase_similarity(&mut tape, &[fv], pv);
            let v = tape.scalar_value(s);
            assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&v));
        }
    }
}
