//! In-model feature refiners.
//!
//! The video encoder runs a multi-head self-attention stack along the
//! frame axis over the global slots (averaged residual per layer) and a
//! pointwise affine over the patch slots. The query encoder is an affine
//! map per word; the sentence vector is the mean of the mapped words
//! through a second affine.

use ndarray::{Array2, Array3};

use crate::config::ModelConfig;
use crate::nn::{Affine, Bound, MultiHeadAttention, ParamStore};
use crate::tape::{Tape, Var};

pub struct VideoEncoder {
    pub layers: Vec<MultiHeadAttention>,
    pub patch: Affine,
}

/// Encoded video: refined global-frame sequence plus per-frame full grids
/// (row 0 of each frame is the encoded global slot).
pub struct EncodedVideo {
    pub globals: Var,
    pub frames: Vec<Var>,
}

impl VideoEncoder {
    pub fn register(store: &mut ParamStore, seed: u64, cfg: &ModelConfig) {
        for l in 0..cfg.encoder_depth {
            MultiHeadAttention::register(store, seed, &format!("encoder.video.attn{l}"), cfg.feature_dim);
        }
        Affine::register(store, seed, "encoder.video.patch", cfg.feature_dim, cfg.feature_dim);
    }

    pub fn bind(b: &Bound, cfg: &ModelConfig) -> Self {
        VideoEncoder {
            layers: (0..cfg.encoder_depth)
                .map(|l| MultiHeadAttention::bind(b, &format!("encoder.video.attn{l}"), cfg.attention_heads, true))
                .collect(),
            patch: Affine::bind(b, "encoder.video.patch"),
        }
    }

    /// `[N_v, C+1, d] -> same shape`: global slots get the attention
    /// residual along frames, patch slots a pointwise projection.
    pub fn apply(&self, tape: &mut Tape, grid: &Array3<f64>) -> EncodedVideo {
        let (n_v, slots, d) = grid.dim();
        let raw_globals = tape.leaf(grid.index_axis(ndarray::Axis(1), 0).to_owned());
        let mut g = raw_globals;
        for layer in &self.layers {
            let a = layer.apply(tape, g, g, None);
            let s = tape.add(g, a);
            g = tape.scale(s, 0.5);
        }

        let mut frames = Vec::with_capacity(n_v);
        for i in 0..n_v {
            let global_row = tape.row(g, i);
            if slots == 1 {
                frames.push(global_row);
                continue;
            }
            let raw_patches = tape.leaf(
                grid.index_axis(ndarray::Axis(0), i)
                    .slice(ndarray::s![1.., ..])
                    .to_owned(),
            );
            let projected = self.patch.apply(tape, raw_patches);
            frames.push(tape.concat_rows(&[global_row, projected]));
        }
        debug_assert_eq!(tape.value(g).dim(), (n_v, d));
        EncodedVideo { globals: g, frames }
    }
}

pub struct QueryEncoder {
    pub word: Affine,
    pub sentence: Affine,
}

/// Encoded query: refined word rows and the pooled sentence vector.
pub struct EncodedQuery {
    pub words: Var,
    pub sentence: Var,
}

impl QueryEncoder {
    pub fn register(store: &mut ParamStore, seed: u64, cfg: &ModelConfig) {
        Affine::register(store, seed, "encoder.query.word", cfg.feature_dim, cfg.feature_dim);
        Affine::register(store, seed, "encoder.query.sentence", cfg.feature_dim, cfg.feature_dim);
    }

    pub fn bind(b: &Bound) -> Self {
        QueryEncoder {
            word: Affine::bind(b, "encoder.query.word"),
            sentence: Affine::bind(b, "encoder.query.sentence"),
        }
    }

    pub fn apply(&self, tape: &mut Tape, words: &Array2<f64>) -> EncodedQuery {
        let raw = tape.leaf(words.clone());
        let mapped = self.word.apply(tape, raw);
        let pooled = tape.mean_rows(mapped);
        let sentence = self.sentence.apply(tape, pooled);
        EncodedQuery { words: mapped, sentence }
    }
}
